// SPDX-License-Identifier: Apache-2.0

//! C ABI over `sbpf-core`.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_load`/`*_connect` function and destroyed by the matching
//! `*_free`. Fallible calls return [`SbpfStatus`]; the detail of the most
//! recent failure on the calling thread is available from
//! [`sbpf_last_error`]. Panics never unwind into C.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sbpf_core::integrity::{self, ServiceKey, KEY_LEN};
use sbpf_core::isa::decode_program;
use sbpf_core::pss::{self, PerceptronModel, PssConfig};
use sbpf_core::transport::{self, Client, LoadedLibrary, StatRecord, Status, TransportError};
use sbpf_core::verifier::{self, VerifiedProgram};
use sbpf_core::vm::{Context, HelperEnv, HelperTable, VmInstance};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SbpfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DecodeFailed = 3,
    VerificationFailed = 4,
    ExecutionFailed = 5,
    IntegrityFailed = 6,
    TransportFailed = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A decoded program that passed verification.
pub struct SbpfProgram {
    inner: VerifiedProgram,
}

/// A VM with the standard helper table and no shared segment.
pub struct SbpfVm {
    inner: VmInstance,
}

/// A process-local perceptron predictor.
pub struct SbpfPss {
    inner: PerceptronModel<Vec<i16>>,
}

/// A connection to a running service.
pub struct SbpfClient {
    inner: Client,
}

/// A library loaded through a client, with a VM bound to its segment.
pub struct SbpfLibrary {
    lib: LoadedLibrary,
    vm: VmInstance,
}

/// Result of a statfs call.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SbpfStatRecord {
    pub path_len: u64,
    pub path_hash: u64,
    pub block_size: u64,
    pub blocks: u64,
}

impl From<StatRecord> for SbpfStatRecord {
    fn from(r: StatRecord) -> Self {
        SbpfStatRecord {
            path_len: r.path_len,
            path_hash: r.path_hash,
            block_size: r.block_size,
            blocks: r.blocks,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(SbpfStatus, String);

impl Fail {
    fn new(status: SbpfStatus, msg: impl std::fmt::Display) -> Self {
        Fail(status, msg.to_string())
    }
}

impl From<TransportError> for Fail {
    fn from(e: TransportError) -> Self {
        let status = match e.status() {
            Some(Status::IntegrityRejected) => SbpfStatus::IntegrityFailed,
            Some(Status::VerificationRejected) => SbpfStatus::VerificationFailed,
            _ => match e {
                TransportError::Vm(_) => SbpfStatus::ExecutionFailed,
                TransportError::PathTooLong(_) | TransportError::InvalidThread { .. } | TransportError::NoThread => {
                    SbpfStatus::InvalidArgument
                }
                _ => SbpfStatus::TransportFailed,
            },
        };
        Fail::new(status, e)
    }
}

/// Runs `f`, records any failure, and converts panics into `Panic`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SbpfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SbpfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside sbpf");
            SbpfStatus::Panic
        }
    }
}

unsafe fn bytes<'a>(ptr: *const u8, len: usize) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Fail::new(SbpfStatus::NullPointer, "null buffer with nonzero length"));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn obj<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or_else(|| Fail::new(SbpfStatus::NullPointer, format!("{what} is null")))
}

unsafe fn obj_mut<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| Fail::new(SbpfStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out<'a, T>(ptr: *mut T) -> Result<&'a mut T, Fail> {
    obj_mut(ptr, "output pointer")
}

unsafe fn key(ptr: *const u8) -> Result<ServiceKey, Fail> {
    let k = bytes(ptr, KEY_LEN)?;
    Ok(ServiceKey(k.try_into().expect("KEY_LEN bytes")))
}

unsafe fn features(ptr: *const u64) -> Result<[u64; 3], Fail> {
    if ptr.is_null() {
        return Err(Fail::new(SbpfStatus::NullPointer, "features is null"));
    }
    Ok(*(ptr as *const [u64; 3]))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

// ---------------------------------------------------------------------------
// Errors

/// Static description of `status`.
#[no_mangle]
pub extern "C" fn sbpf_status_message(status: SbpfStatus) -> *const c_char {
    let s: &'static CStr = match status {
        SbpfStatus::Ok => c"ok",
        SbpfStatus::NullPointer => c"null pointer argument",
        SbpfStatus::InvalidArgument => c"invalid argument",
        SbpfStatus::DecodeFailed => c"program could not be decoded",
        SbpfStatus::VerificationFailed => c"program failed verification",
        SbpfStatus::ExecutionFailed => c"execution failed",
        SbpfStatus::IntegrityFailed => c"integrity check failed",
        SbpfStatus::TransportFailed => c"service communication failed",
        SbpfStatus::BufferTooSmall => c"output buffer too small",
        SbpfStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap - 1` bytes) and returns its full length.
#[no_mangle]
pub unsafe extern "C" fn sbpf_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

// ---------------------------------------------------------------------------
// Programs and the VM

/// Decodes and verifies raw bytecode against the standard helper table.
#[no_mangle]
pub unsafe extern "C" fn sbpf_program_load(code: *const u8, len: usize, out_program: *mut *mut SbpfProgram) -> SbpfStatus {
    guard(|| {
        let out_program = out(out_program)?;
        *out_program = std::ptr::null_mut();
        let program = decode_program(bytes(code, len)?).map_err(|e| Fail::new(SbpfStatus::DecodeFailed, e))?;
        let verified = verifier::verify(&program, &HelperTable::standard().ids())
            .map_err(|r| Fail::new(SbpfStatus::VerificationFailed, r.to_string().trim_end()))?;
        *out_program = boxed(SbpfProgram { inner: verified });
        Ok(())
    })
}

/// Number of 8-byte slots in the program, or 0 for a null pointer.
#[no_mangle]
pub unsafe extern "C" fn sbpf_program_len(program: *const SbpfProgram) -> usize {
    program.as_ref().map_or(0, |p| p.inner.instructions().len())
}

#[no_mangle]
pub unsafe extern "C" fn sbpf_program_free(program: *mut SbpfProgram) {
    free(program)
}

#[no_mangle]
pub extern "C" fn sbpf_vm_new() -> *mut SbpfVm {
    boxed(SbpfVm {
        inner: VmInstance::standard(HelperEnv::default()),
    })
}

#[no_mangle]
pub unsafe extern "C" fn sbpf_vm_free(vm: *mut SbpfVm) {
    free(vm)
}

/// Runs `program` with `r1..r5 = args[0..5]` (all zero if `args` is null).
#[no_mangle]
pub unsafe extern "C" fn sbpf_vm_execute(
    vm: *const SbpfVm,
    program: *const SbpfProgram,
    args: *const u64,
    out_r0: *mut u64,
) -> SbpfStatus {
    guard(|| {
        let vm = obj(vm, "vm")?;
        let program = obj(program, "program")?;
        let out_r0 = out(out_r0)?;
        let regs = if args.is_null() { [0; 5] } else { *(args as *const [u64; 5]) };
        *out_r0 = vm
            .inner
            .execute(&program.inner, Context::args(regs))
            .map_err(|e| Fail::new(SbpfStatus::ExecutionFailed, e))?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Signed containers

/// Wraps `payload` into a signed container. `key` points at 32 bytes. The
/// required size is always stored in `out_len`; if it exceeds `cap`, nothing
/// is written and `BufferTooSmall` is returned.
#[no_mangle]
pub unsafe extern "C" fn sbpf_library_sign(
    key_bytes: *const u8,
    payload: *const u8,
    payload_len: usize,
    out_buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> SbpfStatus {
    guard(|| {
        let out_len = out(out_len)?;
        let k = key(key_bytes)?;
        let lib = integrity::sign_library(bytes(payload, payload_len)?, &k)
            .map_err(|e| Fail::new(SbpfStatus::InvalidArgument, e))?;
        let encoded = lib.to_bytes();
        *out_len = encoded.len();
        if encoded.len() > cap {
            return Err(Fail::new(
                SbpfStatus::BufferTooSmall,
                format!("need {} bytes, have {cap}", encoded.len()),
            ));
        }
        if out_buf.is_null() {
            return Err(Fail::new(SbpfStatus::NullPointer, "output buffer is null"));
        }
        std::ptr::copy_nonoverlapping(encoded.as_ptr(), out_buf, encoded.len());
        Ok(())
    })
}

/// `Ok` if `container` parses and its tag matches `key`.
#[no_mangle]
pub unsafe extern "C" fn sbpf_library_verify(key_bytes: *const u8, container: *const u8, len: usize) -> SbpfStatus {
    guard(|| {
        let k = key(key_bytes)?;
        integrity::verify_container(bytes(container, len)?, &k).map_err(|e| Fail::new(SbpfStatus::IntegrityFailed, e))?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Perceptron

#[no_mangle]
pub extern "C" fn sbpf_pss_hash_index(feature: u64, salt: u64) -> usize {
    pss::hash_index(feature, salt)
}

/// A zeroed model with threshold `theta` and the default salts.
#[no_mangle]
pub extern "C" fn sbpf_pss_new(theta: i32) -> *mut SbpfPss {
    boxed(SbpfPss {
        inner: PerceptronModel::local(PssConfig {
            theta,
            ..PssConfig::default()
        }),
    })
}

#[no_mangle]
pub unsafe extern "C" fn sbpf_pss_free(model: *mut SbpfPss) {
    free(model)
}

/// Predicts for three features; `out_margin` may be null.
#[no_mangle]
pub unsafe extern "C" fn sbpf_pss_predict(
    model: *const SbpfPss,
    feature3: *const u64,
    out_decision: *mut bool,
    out_margin: *mut i32,
) -> SbpfStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let p = m.inner.predict(&features(feature3)?);
        *out(out_decision)? = p.decision;
        if let Some(margin) = out_margin.as_mut() {
            *margin = p.margin;
        }
        Ok(())
    })
}

/// Trains on one labelled sample; `out_decision` receives the prediction
/// made before training and may be null.
#[no_mangle]
pub unsafe extern "C" fn sbpf_pss_update(
    model: *mut SbpfPss,
    feature3: *const u64,
    outcome: bool,
    out_decision: *mut bool,
) -> SbpfStatus {
    guard(|| {
        let m = obj_mut(model, "model")?;
        let p = m.inner.update(&features(feature3)?, outcome);
        if let Some(d) = out_decision.as_mut() {
            *d = p.decision;
        }
        Ok(())
    })
}

/// Weight at `index`, or 0 when out of range or `model` is null.
#[no_mangle]
pub unsafe extern "C" fn sbpf_pss_weight(model: *const SbpfPss, index: usize) -> i16 {
    match model.as_ref() {
        Some(m) if index < pss::TABLE_SIZE => m.inner.weight(index),
        _ => 0,
    }
}

// ---------------------------------------------------------------------------
// Service client

#[no_mangle]
pub unsafe extern "C" fn sbpf_client_connect(socket_path: *const c_char, out_client: *mut *mut SbpfClient) -> SbpfStatus {
    guard(|| {
        let out_client = out(out_client)?;
        *out_client = std::ptr::null_mut();
        if socket_path.is_null() {
            return Err(Fail::new(SbpfStatus::NullPointer, "socket path is null"));
        }
        let path = CStr::from_ptr(socket_path)
            .to_str()
            .map_err(|e| Fail::new(SbpfStatus::InvalidArgument, e))?;
        *out_client = boxed(SbpfClient {
            inner: Client::connect(Path::new(path))?,
        });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sbpf_client_free(client: *mut SbpfClient) {
    free(client)
}

/// Service-wide copy and round-trip counters.
#[no_mangle]
pub unsafe extern "C" fn sbpf_client_stats(
    client: *mut SbpfClient,
    out_copy_bytes: *mut u64,
    out_round_trips: *mut u64,
) -> SbpfStatus {
    guard(|| {
        let c = obj_mut(client, "client")?;
        let (copies, trips) = c.inner.stats()?;
        *out(out_copy_bytes)? = copies;
        *out(out_round_trips)? = trips;
        Ok(())
    })
}

/// Copy-based statfs of `path`.
#[no_mangle]
pub unsafe extern "C" fn sbpf_client_baseline_statfs(
    client: *mut SbpfClient,
    path: *const u8,
    len: usize,
    out_record: *mut SbpfStatRecord,
) -> SbpfStatus {
    guard(|| {
        let c = obj_mut(client, "client")?;
        let r = transport::baseline_statfs(&mut c.inner, bytes(path, len)?)?;
        *out(out_record)? = r.into();
        Ok(())
    })
}

/// Submits a signed container for `task_id` and attaches its segment. The
/// returned library's VM uses thread slot `thread`, or none if negative.
#[no_mangle]
pub unsafe extern "C" fn sbpf_client_load(
    client: *mut SbpfClient,
    task_id: u64,
    container: *const u8,
    len: usize,
    thread: i64,
    out_library: *mut *mut SbpfLibrary,
) -> SbpfStatus {
    guard(|| {
        let out_library = out(out_library)?;
        *out_library = std::ptr::null_mut();
        let c = obj_mut(client, "client")?;
        let lib = c.inner.load_library(task_id, bytes(container, len)?)?;
        let vm = lib.vm(usize::try_from(thread).ok());
        *out_library = boxed(SbpfLibrary { lib, vm });
        Ok(())
    })
}

/// The segment's base handle, or 0 for a null pointer.
#[no_mangle]
pub unsafe extern "C" fn sbpf_library_handle(library: *const SbpfLibrary) -> u64 {
    library.as_ref().map_or(0, |l| l.lib.handle)
}

/// Zero-copy statfs through a library loaded from the statfs program.
#[no_mangle]
pub unsafe extern "C" fn sbpf_library_statfs(
    client: *mut SbpfClient,
    library: *const SbpfLibrary,
    path: *const u8,
    len: usize,
    out_record: *mut SbpfStatRecord,
) -> SbpfStatus {
    guard(|| {
        let c = obj_mut(client, "client")?;
        let l = obj(library, "library")?;
        let r = transport::sbpf_statfs(&mut c.inner, &l.vm, &l.lib.program, bytes(path, len)?)?;
        *out(out_record)? = r.into();
        Ok(())
    })
}

/// Runs the library's program on its segment-bound VM.
#[no_mangle]
pub unsafe extern "C" fn sbpf_library_execute(library: *const SbpfLibrary, args: *const u64, out_r0: *mut u64) -> SbpfStatus {
    guard(|| {
        let l = obj(library, "library")?;
        let regs = if args.is_null() { [0; 5] } else { *(args as *const [u64; 5]) };
        *out(out_r0)? = l
            .vm
            .execute(&l.lib.program, Context::args(regs))
            .map_err(|e| Fail::new(SbpfStatus::ExecutionFailed, e))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sbpf_library_free(library: *mut SbpfLibrary) {
    free(library)
}
