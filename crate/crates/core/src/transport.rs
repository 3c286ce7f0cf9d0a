// SPDX-License-Identifier: Apache-2.0

//! The emulated user/kernel boundary.
//!
//! A service process owns the segment [`Manager`] and answers requests on a
//! Unix stream socket. Baseline operations carry their data inside the
//! messages; accelerated operations carry only identifiers (a doorbell) and
//! exchange data through the shared segment.
//!
//! Request: `op: u8 | id: u64 | len: u32 | payload`.
//! Response: `status: u8 | len: u32 | payload`. Integers little-endian.

use std::collections::{BTreeSet, HashMap};
use std::io::{self, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::integrity::{self, IntegrityError, ServiceKey, SignedLibrary};
use crate::isa::{decode_program, IsaError};
use crate::programs::{STATFS_READ_RETVAL, STATFS_WRITE_ARGS};
use crate::pss::{self, decode_batch, encode_batch, PerceptronModel, PssConfig, Update, UpdateBatch};
use crate::ring::{stress_payload, Drainer, SpscRing};
use crate::shmem::{Manager, SegmentView, SharedSegment, ShmError, TaskId, ThreadSlotLayout};
use crate::verifier::{self, VerifiedProgram, VerifierReport};
use crate::vm::{Context, HelperEnv, HelperTable, VmError, VmInstance};

pub const OP_ALLOC: u8 = 1;
pub const OP_RELEASE: u8 = 2;
pub const OP_BASELINE_STATFS: u8 = 3;
pub const OP_DOORBELL_STATFS: u8 = 4;
pub const OP_SHUTDOWN: u8 = 5;
pub const OP_STATS: u8 = 6;
pub const OP_RING_DRAIN_ONE: u8 = 7;
pub const OP_RING_DRAIN_BATCH: u8 = 8;
pub const OP_PSS_FLUSH: u8 = 9;
pub const OP_RING_STRESS: u8 = 10;
pub const OP_COUNTERS: u8 = 11;

pub const REQUEST_HEADER: usize = 13;
pub const RESPONSE_HEADER: usize = 5;
pub const MAX_MESSAGE: usize = 64 << 20;
pub const MAX_PATH_LEN: usize = 4095;
pub const STAT_RECORD_SIZE: usize = 64;
pub const STAT_BLOCK_SIZE: u64 = 4096;

/// Give up on a stress run after this long without progress.
const STRESS_STALL: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    IntegrityRejected = 1,
    VerificationRejected = 2,
    Malformed = 3,
    NotFound = 4,
    InvalidThread = 5,
    LengthExceedsSlot = 6,
    NotAttached = 7,
    PathTooLong = 8,
    AllocationFailed = 9,
    Internal = 255,
}

impl Status {
    pub fn from_u8(b: u8) -> Option<Self> {
        use Status::*;
        Some(match b {
            0 => Ok,
            1 => IntegrityRejected,
            2 => VerificationRejected,
            3 => Malformed,
            4 => NotFound,
            5 => InvalidThread,
            6 => LengthExceedsSlot,
            7 => NotAttached,
            8 => PathTooLong,
            9 => AllocationFailed,
            255 => Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("channel closed")]
    ChannelClosed,
    #[error("i/o error: {0}")]
    Io(io::Error),
    #[error("service answered {status:?}: {message}")]
    Rejected { status: Status, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("path of {0} bytes is outside 1..={MAX_PATH_LEN}")]
    PathTooLong(usize),
    #[error("thread {thread} outside slot pool of {max_threads}")]
    InvalidThread { thread: usize, max_threads: usize },
    #[error("no thread slot bound to this VM")]
    NoThread,
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("oracle mismatch: {0}")]
    Mismatch(String),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        use io::ErrorKind::*;
        match e.kind() {
            UnexpectedEof | BrokenPipe | ConnectionReset | ConnectionAborted | NotConnected => {
                TransportError::ChannelClosed
            }
            _ => TransportError::Io(e),
        }
    }
}

impl TransportError {
    pub fn status(&self) -> Option<Status> {
        match self {
            TransportError::Rejected { status, .. } => Some(*status),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Stat records

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Synthetic, path-determined result of the statfs-like call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatRecord {
    pub path_len: u64,
    pub path_hash: u64,
    pub block_size: u64,
    pub blocks: u64,
}

impl StatRecord {
    pub fn for_path(path: &[u8]) -> Self {
        let path_hash = fnv1a64(path);
        StatRecord {
            path_len: path.len() as u64,
            path_hash,
            block_size: STAT_BLOCK_SIZE,
            blocks: path_hash & ((1 << 20) - 1),
        }
    }

    pub fn to_bytes(&self) -> [u8; STAT_RECORD_SIZE] {
        let mut b = [0u8; STAT_RECORD_SIZE];
        for (i, v) in [self.path_len, self.path_hash, self.block_size, self.blocks]
            .into_iter()
            .enumerate()
        {
            b[i * 8..i * 8 + 8].copy_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, TransportError> {
        if b.len() != STAT_RECORD_SIZE {
            return Err(TransportError::Protocol(format!("stat record of {} bytes", b.len())));
        }
        let w = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        Ok(StatRecord {
            path_len: w(0),
            path_hash: w(1),
            block_size: w(2),
            blocks: w(3),
        })
    }
}

fn check_path(path: &[u8]) -> Result<(), TransportError> {
    if path.is_empty() || path.len() > MAX_PATH_LEN {
        Err(TransportError::PathTooLong(path.len()))
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Thread-slot access on the service side

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SlotError {
    #[error("thread {thread} outside slot pool of {max_threads}")]
    InvalidThread { thread: usize, max_threads: usize },
    #[error("length {len} exceeds slot size {max}")]
    LengthExceedsSlot { len: usize, max: usize },
}

fn slot_error(e: ShmError) -> SlotError {
    match e {
        ShmError::InvalidThread { thread, max_threads } => SlotError::InvalidThread { thread, max_threads },
        other => unreachable!("layout offsets are validated: {other}"),
    }
}

/// A borrowed window onto a thread's args memory.
pub struct SlotRef<'a> {
    view: &'a SegmentView,
    offset: usize,
    len: usize,
}

impl SlotRef<'_> {
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The bytes in place. The caller must hold the thread's slot lock.
    pub fn as_slice(&self) -> &[u8] {
        let p = self
            .view
            .ptr(self.offset as u64, self.len as u64)
            .expect("slot lies inside the segment");
        // SAFETY: bounds checked; the slot lock keeps service-side writers
        // out and the owning user thread is blocked on its doorbell.
        unsafe { std::slice::from_raw_parts(p, self.len) }
    }
}

/// View of the first `len` bytes of `thread`'s args memory. No copy.
pub fn sbpf_copy_from_user<'a>(
    view: &'a SegmentView,
    layout: &ThreadSlotLayout,
    thread: usize,
    len: usize,
) -> Result<SlotRef<'a>, SlotError> {
    let offset = layout.args_offset(thread).map_err(slot_error)?;
    if len > layout.args_size {
        return Err(SlotError::LengthExceedsSlot { len, max: layout.args_size });
    }
    Ok(SlotRef { view, offset, len })
}

/// Place `bytes` at the start of `thread`'s return-value memory.
pub fn sbpf_copy_to_user(
    view: &SegmentView,
    layout: &ThreadSlotLayout,
    thread: usize,
    bytes: &[u8],
) -> Result<(), SlotError> {
    let offset = layout.ret_offset(thread).map_err(slot_error)?;
    if bytes.len() > layout.ret_size {
        return Err(SlotError::LengthExceedsSlot { len: bytes.len(), max: layout.ret_size });
    }
    view.write(offset as u64, bytes).expect("slot lies inside the segment");
    Ok(())
}

// ---------------------------------------------------------------------------
// Service

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("integrity check failed")]
    IntegrityRejected,
    #[error("verification failed:\n{0}")]
    VerificationRejected(VerifierReport),
    #[error("payload is not a valid program: {0}")]
    InvalidProgram(IsaError),
    #[error("segment allocation failed: {0}")]
    AllocationFailed(ShmError),
}

/// Instrumentation of the load gate and the drain path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateCounters {
    pub integrity_checks: u64,
    pub integrity_rejections: u64,
    pub verifier_invocations: u64,
    pub verifier_rejections: u64,
    pub loads_accepted: u64,
    pub drain_calls: u64,
}

impl GateCounters {
    const FIELDS: usize = 6;

    fn to_bytes(self) -> Vec<u8> {
        [
            self.integrity_checks,
            self.integrity_rejections,
            self.verifier_invocations,
            self.verifier_rejections,
            self.loads_accepted,
            self.drain_calls,
        ]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
    }

    fn from_bytes(b: &[u8]) -> Result<Self, TransportError> {
        let w = read_u64s::<{ GateCounters::FIELDS }>(b)?;
        Ok(GateCounters {
            integrity_checks: w[0],
            integrity_rejections: w[1],
            verifier_invocations: w[2],
            verifier_rejections: w[3],
            loads_accepted: w[4],
            drain_calls: w[5],
        })
    }
}

#[derive(Default)]
struct AtomicCounters {
    copy_bytes: AtomicU64,
    round_trips: AtomicU64,
    integrity_checks: AtomicU64,
    integrity_rejections: AtomicU64,
    verifier_invocations: AtomicU64,
    verifier_rejections: AtomicU64,
    loads_accepted: AtomicU64,
    drain_calls: AtomicU64,
}

fn bump(c: &AtomicU64, n: u64) {
    c.fetch_add(n, Ordering::Relaxed);
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub key: ServiceKey,
    pub seed: Option<u64>,
    pub pss: PssConfig,
}

impl ServiceConfig {
    pub fn new(key: ServiceKey) -> Self {
        ServiceConfig {
            key,
            seed: None,
            pss: PssConfig::default(),
        }
    }
}

/// The privileged side: segment manager, load gate and request handlers.
pub struct Service {
    manager: Manager,
    config: ServiceConfig,
    helper_ids: BTreeSet<u32>,
    counters: AtomicCounters,
    /// Number of connections that have loaded each task.
    attachments: Mutex<HashMap<TaskId, usize>>,
    stopping: AtomicBool,
}

impl Service {
    pub fn new(config: ServiceConfig) -> Self {
        Service {
            manager: Manager::new(config.seed),
            helper_ids: HelperTable::standard().ids(),
            config,
            counters: AtomicCounters::default(),
            attachments: Mutex::new(HashMap::new()),
            stopping: AtomicBool::new(false),
        }
    }

    pub fn manager(&self) -> &Manager {
        &self.manager
    }

    pub fn stats(&self) -> (u64, u64) {
        (
            self.counters.copy_bytes.load(Ordering::Relaxed),
            self.counters.round_trips.load(Ordering::Relaxed),
        )
    }

    pub fn gate_counters(&self) -> GateCounters {
        let c = &self.counters;
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        GateCounters {
            integrity_checks: l(&c.integrity_checks),
            integrity_rejections: l(&c.integrity_rejections),
            verifier_invocations: l(&c.verifier_invocations),
            verifier_rejections: l(&c.verifier_rejections),
            loads_accepted: l(&c.loads_accepted),
            drain_calls: l(&c.drain_calls),
        }
    }

    /// Integrity check, then verification, then allocation. Nothing about
    /// the segment is produced unless all three succeed.
    pub fn load_library(
        &self,
        container: &[u8],
        task_id: TaskId,
    ) -> Result<(Arc<SharedSegment>, VerifiedProgram), LoadError> {
        let c = &self.counters;
        bump(&c.integrity_checks, 1);
        let lib = match integrity::verify_container(container, &self.config.key) {
            Ok(lib) => lib,
            Err(_) => {
                bump(&c.integrity_rejections, 1);
                return Err(LoadError::IntegrityRejected);
            }
        };
        bump(&c.verifier_invocations, 1);
        let program = decode_program(&lib.payload).map_err(|e| {
            bump(&c.verifier_rejections, 1);
            LoadError::InvalidProgram(e)
        })?;
        let verified = verifier::verify(&program, &self.helper_ids).map_err(|r| {
            bump(&c.verifier_rejections, 1);
            LoadError::VerificationRejected(r)
        })?;
        let seg = self
            .manager
            .allocate_or_reuse(task_id)
            .map_err(LoadError::AllocationFailed)?;
        bump(&c.loads_accepted, 1);
        Ok((seg, verified))
    }

    /// Accept connections until a shutdown request arrives.
    pub fn serve(self: Arc<Self>, listener: UnixListener) -> io::Result<()> {
        let wake = listener
            .local_addr()?
            .as_pathname()
            .map(Path::to_path_buf)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "unnamed socket"))?;
        let mut workers: Vec<(JoinHandle<()>, UnixStream)> = Vec::new();
        for conn in listener.incoming() {
            if self.stopping.load(Ordering::Acquire) {
                break;
            }
            let (stream, peer) = match conn.and_then(|s| {
                let c = s.try_clone()?;
                Ok((s, c))
            }) {
                Ok(pair) => pair,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let svc = self.clone();
            let wake = wake.clone();
            let worker = std::thread::spawn(move || {
                let mut conn = Connection {
                    svc: &svc,
                    stream,
                    bound: None,
                    loaded: BTreeSet::new(),
                    drainer: Drainer::default(),
                };
                let shutdown = conn.run();
                conn.detach_all();
                if shutdown {
                    svc.stopping.store(true, Ordering::Release);
                    let _ = UnixStream::connect(&wake);
                }
            });
            workers.retain(|(w, _)| !w.is_finished());
            workers.push((worker, peer));
        }
        log::info!("service stopping");
        for (w, s) in workers {
            let _ = s.shutdown(std::net::Shutdown::Both);
            let _ = w.join();
        }
        Ok(())
    }

    fn attach(&self, task_id: TaskId) {
        *self.attachments.lock().unwrap().entry(task_id).or_default() += 1;
    }

    fn detach(&self, task_id: TaskId) {
        let mut a = self.attachments.lock().unwrap();
        if let Some(n) = a.get_mut(&task_id) {
            *n -= 1;
            if *n == 0 {
                a.remove(&task_id);
                let _ = self.manager.release(task_id);
            }
        }
    }

    fn release(&self, task_id: TaskId) -> Result<(), ShmError> {
        self.attachments.lock().unwrap().remove(&task_id);
        self.manager.release(task_id)
    }
}

struct Connection<'s> {
    svc: &'s Service,
    stream: UnixStream,
    bound: Option<Arc<SharedSegment>>,
    loaded: BTreeSet<TaskId>,
    drainer: Drainer,
}

type Reply = (Status, Vec<u8>);

fn reply_err(status: Status, msg: impl std::fmt::Display) -> Reply {
    (status, msg.to_string().into_bytes())
}

fn read_u64s<const N: usize>(b: &[u8]) -> Result<[u64; N], TransportError> {
    if b.len() != N * 8 {
        return Err(TransportError::Protocol(format!("expected {} bytes, got {}", N * 8, b.len())));
    }
    Ok(std::array::from_fn(|i| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap())))
}

fn u64s(values: &[u64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Connection<'_> {
    /// Serve requests until EOF or shutdown; returns true on shutdown.
    fn run(&mut self) -> bool {
        let mut header = [0u8; REQUEST_HEADER];
        loop {
            if self.stream.read_exact(&mut header).is_err() {
                return false;
            }
            let op = header[0];
            let id = u64::from_le_bytes(header[1..9].try_into().unwrap());
            let len = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
            if len > MAX_MESSAGE {
                let _ = self.respond(Status::Malformed, b"message too large");
                return false;
            }
            let mut payload = vec![0u8; len];
            if self.stream.read_exact(&mut payload).is_err() {
                return false;
            }
            if op != OP_STATS && op != OP_COUNTERS {
                bump(&self.svc.counters.round_trips, 1);
            }
            let (status, body) = self.dispatch(op, id, &payload);
            if matches!(op, OP_BASELINE_STATFS | OP_RING_DRAIN_ONE | OP_PSS_FLUSH) && status == Status::Ok {
                bump(&self.svc.counters.copy_bytes, (payload.len() + body.len()) as u64);
            }
            if self.respond(status, &body).is_err() {
                return false;
            }
            if op == OP_SHUTDOWN {
                return true;
            }
        }
    }

    fn respond(&mut self, status: Status, body: &[u8]) -> io::Result<()> {
        let mut msg = Vec::with_capacity(RESPONSE_HEADER + body.len());
        msg.push(status as u8);
        msg.extend_from_slice(&(body.len() as u32).to_le_bytes());
        msg.extend_from_slice(body);
        self.stream.write_all(&msg)
    }

    fn detach_all(&mut self) {
        for task in std::mem::take(&mut self.loaded) {
            self.svc.detach(task);
        }
    }

    fn dispatch(&mut self, op: u8, id: u64, payload: &[u8]) -> Reply {
        match op {
            OP_ALLOC => self.load(id, payload),
            OP_RELEASE => {
                self.loaded.remove(&id);
                if self.bound.as_ref().is_some_and(|s| s.task_id == id) {
                    self.bound = None;
                }
                match self.svc.release(id) {
                    Ok(()) => (Status::Ok, vec![]),
                    Err(e) => reply_err(Status::NotFound, e),
                }
            }
            OP_BASELINE_STATFS => {
                if payload.is_empty() || payload.len() > MAX_PATH_LEN {
                    return reply_err(Status::PathTooLong, payload.len());
                }
                (Status::Ok, StatRecord::for_path(payload).to_bytes().to_vec())
            }
            OP_DOORBELL_STATFS => self.doorbell_statfs(id as usize),
            OP_SHUTDOWN => (Status::Ok, vec![]),
            OP_STATS => {
                let (c, r) = self.svc.stats();
                (Status::Ok, u64s(&[c, r]))
            }
            OP_RING_DRAIN_ONE => {
                if payload.is_empty() {
                    return reply_err(Status::Malformed, "empty record");
                }
                bump(&self.svc.counters.drain_calls, 1);
                self.drainer.observe(payload);
                (Status::Ok, payload.to_vec())
            }
            OP_RING_DRAIN_BATCH => self.drain_batch(id),
            OP_PSS_FLUSH => self.pss_flush(payload),
            OP_RING_STRESS => self.ring_stress(id, payload),
            OP_COUNTERS => (Status::Ok, self.svc.gate_counters().to_bytes()),
            _ => reply_err(Status::Malformed, format!("unknown op {op}")),
        }
    }

    fn load(&mut self, task_id: TaskId, container: &[u8]) -> Reply {
        match self.svc.load_library(container, task_id) {
            Ok((seg, _)) => {
                if self.loaded.insert(task_id) {
                    self.svc.attach(task_id);
                }
                let mut body = Vec::new();
                body.extend_from_slice(&seg.base_handle().to_le_bytes());
                body.extend_from_slice(&(seg.size() as u64).to_le_bytes());
                body.extend_from_slice(&(seg.name().len() as u16).to_le_bytes());
                body.extend_from_slice(seg.name().as_bytes());
                self.bound = Some(seg);
                (Status::Ok, body)
            }
            Err(LoadError::IntegrityRejected) => (Status::IntegrityRejected, vec![]),
            Err(LoadError::VerificationRejected(r)) => reply_err(Status::VerificationRejected, r),
            Err(e @ LoadError::InvalidProgram(_)) => reply_err(Status::VerificationRejected, e),
            Err(e @ LoadError::AllocationFailed(_)) => reply_err(Status::AllocationFailed, e),
        }
    }

    fn bound(&self) -> Result<Arc<SharedSegment>, Reply> {
        self.bound
            .clone()
            .ok_or_else(|| reply_err(Status::NotAttached, "no library loaded on this connection"))
    }

    fn doorbell_statfs(&mut self, thread: usize) -> Reply {
        let seg = match self.bound() {
            Ok(s) => s,
            Err(r) => return r,
        };
        let layout = self.svc.manager.layout();
        let Some(lock) = seg.slot_lock(thread) else {
            return reply_err(Status::InvalidThread, thread);
        };
        let _guard = lock.lock().unwrap();
        let view = seg.view();
        let prefix = match sbpf_copy_from_user(view, &layout, thread, 8) {
            Ok(p) => p,
            Err(e) => return reply_err(Status::InvalidThread, e),
        };
        let len = u64::from_le_bytes(prefix.as_slice().try_into().unwrap()) as usize;
        if len == 0 {
            return reply_err(Status::Malformed, "empty path");
        }
        if len > MAX_PATH_LEN {
            return reply_err(Status::PathTooLong, len);
        }
        let args = match sbpf_copy_from_user(view, &layout, thread, 8 + len) {
            Ok(a) => a,
            Err(e) => return reply_err(Status::LengthExceedsSlot, e),
        };
        let record = StatRecord::for_path(&args.as_slice()[8..]);
        match sbpf_copy_to_user(view, &layout, thread, &record.to_bytes()) {
            Ok(()) => (Status::Ok, vec![]),
            Err(e) => reply_err(Status::LengthExceedsSlot, e),
        }
    }

    fn drain_batch(&mut self, max: u64) -> Reply {
        let seg = match self.bound() {
            Ok(s) => s,
            Err(r) => return r,
        };
        bump(&self.svc.counters.drain_calls, 1);
        let ring = match SpscRing::in_segment(seg.view()) {
            Ok(r) => r,
            Err(e) => return reply_err(Status::Internal, e),
        };
        let max = if max == 0 { usize::MAX } else { max as usize };
        let drainer = &mut self.drainer;
        let before = *drainer;
        match ring.drain_with(max, |p| drainer.observe(p)) {
            Ok(_) => {
                let d = *drainer;
                (
                    Status::Ok,
                    u64s(&[d.records - before.records, d.bytes - before.bytes, d.checksum]),
                )
            }
            Err(e) => reply_err(Status::Internal, e),
        }
    }

    fn pss_flush(&mut self, payload: &[u8]) -> Reply {
        let seg = match self.bound() {
            Ok(s) => s,
            Err(r) => return r,
        };
        let updates = match decode_batch(payload) {
            Ok(u) => u,
            Err(e) => return reply_err(Status::Malformed, e),
        };
        let mut model = match PerceptronModel::in_segment(seg.view(), self.svc.config.pss) {
            Ok(m) => m,
            Err(e) => return reply_err(Status::Internal, e),
        };
        for u in &updates {
            model.update(&u.features, u.outcome);
        }
        (Status::Ok, vec![])
    }

    /// Consume `count` stress records from the bound ring, checking each
    /// against the deterministic generator and sampling occupancy.
    fn ring_stress(&mut self, count: u64, payload: &[u8]) -> Reply {
        let seg = match self.bound() {
            Ok(s) => s,
            Err(r) => return r,
        };
        let [seed, max_len] = match read_u64s::<2>(payload) {
            Ok(v) => v,
            Err(e) => return reply_err(Status::Malformed, e),
        };
        let ring = match SpscRing::in_segment(seg.view()) {
            Ok(r) => r,
            Err(e) => return reply_err(Status::Internal, e),
        };
        let capacity = ring.capacity() as u64;
        let (mut received, mut mismatches, mut max_occ, mut violations) = (0u64, 0u64, 0u64, 0u64);
        let mut expected = Vec::new();
        let mut last_progress = Instant::now();
        let mut idle = 0u32;
        while received < count {
            let occ = ring.occupancy();
            max_occ = max_occ.max(occ);
            if occ > capacity {
                violations += 1;
            }
            let want = (count - received) as usize;
            let n = ring.drain_with(want, |p| {
                stress_payload(seed, received, max_len as usize, &mut expected);
                if p != expected.as_slice() {
                    mismatches += 1;
                }
                received += 1;
            });
            match n {
                Ok(0) => {
                    idle += 1;
                    if idle.is_multiple_of(1024) {
                        std::thread::yield_now();
                        if last_progress.elapsed() > STRESS_STALL {
                            return reply_err(Status::Internal, format!("stalled after {received} records"));
                        }
                    } else {
                        std::hint::spin_loop();
                    }
                }
                Ok(_) => {
                    idle = 0;
                    last_progress = Instant::now();
                }
                Err(e) => return reply_err(Status::Internal, e),
            }
        }
        (Status::Ok, u64s(&[received, mismatches, max_occ, violations]))
    }
}

/// An in-process service on a private socket, for tests and benchmarks.
pub struct ServiceHandle {
    path: PathBuf,
    service: Arc<Service>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

/// A fresh socket path in the temp directory.
pub fn temp_socket_path() -> PathBuf {
    std::env::temp_dir().join(format!("sbpf-{}.sock", uuid::Uuid::new_v4()))
}

impl ServiceHandle {
    pub fn spawn(config: ServiceConfig) -> io::Result<Self> {
        let path = temp_socket_path();
        let listener = UnixListener::bind(&path)?;
        let service = Arc::new(Service::new(config));
        let svc = service.clone();
        let thread = std::thread::spawn(move || svc.serve(listener));
        Ok(ServiceHandle {
            path,
            service,
            thread: Some(thread),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    pub fn connect(&self) -> Result<Client, TransportError> {
        Client::connect(&self.path)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(t) = self.thread.take() {
            if let Ok(mut c) = Client::connect(&self.path) {
                let _ = c.shutdown();
            }
            let _ = t.join();
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// A service running as a child process (`sbpf serve`).
pub struct ServiceProcess {
    path: PathBuf,
    child: Option<Child>,
}

impl ServiceProcess {
    /// Start `exe serve --socket <tmp>` with `key` and wait until it accepts.
    pub fn spawn(exe: &Path, key: &ServiceKey, seed: Option<u64>) -> io::Result<Self> {
        let path = temp_socket_path();
        let mut cmd = Command::new(exe);
        cmd.arg("serve").arg("--socket").arg(&path);
        if let Some(s) = seed {
            cmd.arg("--seed").arg(s.to_string());
        }
        let child = cmd
            .env(integrity::KEY_ENV, key.to_hex())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .spawn()?;
        let mut proc = ServiceProcess {
            path,
            child: Some(child),
        };
        let deadline = Instant::now() + Duration::from_secs(10);
        while UnixStream::connect(&proc.path).is_err() {
            if let Some(status) = proc.child.as_mut().unwrap().try_wait()? {
                return Err(io::Error::other(format!("service exited early: {status}")));
            }
            if Instant::now() > deadline {
                return Err(io::Error::new(io::ErrorKind::TimedOut, "service did not start"));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        Ok(proc)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn pid(&self) -> Option<u32> {
        self.child.as_ref().map(Child::id)
    }

    pub fn connect(&self) -> Result<Client, TransportError> {
        Client::connect(&self.path)
    }
}

impl Drop for ServiceProcess {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            if let Ok(mut c) = Client::connect(&self.path) {
                let _ = c.shutdown();
            }
            let deadline = Instant::now() + Duration::from_secs(5);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

// ---------------------------------------------------------------------------
// Client

/// A library accepted by the service, mapped on the user side.
#[derive(Clone, Debug)]
pub struct LoadedLibrary {
    pub task_id: TaskId,
    pub handle: u64,
    pub view: SegmentView,
    pub program: VerifiedProgram,
}

impl LoadedLibrary {
    /// A VM bound to this segment and, optionally, a thread slot.
    pub fn vm(&self, thread: Option<usize>) -> VmInstance {
        VmInstance::standard(HelperEnv {
            segment: Some(self.view.clone()),
            thread_id: thread,
            ..Default::default()
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DrainSummary {
    pub records: u64,
    pub bytes: u64,
    pub checksum: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StressReport {
    pub received: u64,
    pub mismatches: u64,
    pub max_occupancy: u64,
    pub violations: u64,
}

/// The user side of the boundary channel. One request in flight at a time.
#[derive(Debug)]
pub struct Client {
    stream: UnixStream,
    copy_bytes: u64,
    round_trips: u64,
}

impl Client {
    pub fn connect(path: &Path) -> Result<Self, TransportError> {
        Ok(Client {
            stream: UnixStream::connect(path)?,
            copy_bytes: 0,
            round_trips: 0,
        })
    }

    /// Payload bytes this client moved through baseline requests.
    pub fn copy_bytes(&self) -> u64 {
        self.copy_bytes
    }

    pub fn round_trips(&self) -> u64 {
        self.round_trips
    }

    fn send(&mut self, op: u8, id: u64, payload: &[u8]) -> Result<(), TransportError> {
        let mut msg = Vec::with_capacity(REQUEST_HEADER + payload.len());
        msg.push(op);
        msg.extend_from_slice(&id.to_le_bytes());
        msg.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        msg.extend_from_slice(payload);
        self.stream.write_all(&msg)?;
        Ok(())
    }

    fn receive(&mut self) -> Result<(Status, Vec<u8>), TransportError> {
        let mut header = [0u8; RESPONSE_HEADER];
        self.stream.read_exact(&mut header)?;
        let status = Status::from_u8(header[0])
            .ok_or_else(|| TransportError::Protocol(format!("status byte {}", header[0])))?;
        let len = u32::from_le_bytes(header[1..5].try_into().unwrap()) as usize;
        if len > MAX_MESSAGE {
            return Err(TransportError::Protocol(format!("response of {len} bytes")));
        }
        let mut body = vec![0u8; len];
        if len > 0 {
            self.stream.read_exact(&mut body)?;
        }
        Ok((status, body))
    }

    /// Send one request and return the raw response.
    pub fn request_raw(&mut self, op: u8, id: u64, payload: &[u8]) -> Result<(Status, Vec<u8>), TransportError> {
        self.send(op, id, payload)?;
        let r = self.receive()?;
        if op != OP_STATS && op != OP_COUNTERS {
            self.round_trips += 1;
        }
        Ok(r)
    }

    /// Send one request; non-OK statuses become [`TransportError::Rejected`].
    pub fn request(&mut self, op: u8, id: u64, payload: &[u8]) -> Result<Vec<u8>, TransportError> {
        match self.request_raw(op, id, payload)? {
            (Status::Ok, body) => Ok(body),
            (status, body) => Err(TransportError::Rejected {
                status,
                message: String::from_utf8_lossy(&body).into_owned(),
            }),
        }
    }

    /// Submit a signed container for `task_id`. On success the segment is
    /// mapped locally and the program re-verified on this side.
    pub fn load_library(&mut self, task_id: TaskId, container: &[u8]) -> Result<LoadedLibrary, TransportError> {
        let body = self.request(OP_ALLOC, task_id, container)?;
        let bad = || TransportError::Protocol("malformed load response".into());
        if body.len() < 18 {
            return Err(bad());
        }
        let handle = u64::from_le_bytes(body[0..8].try_into().unwrap());
        let size = u64::from_le_bytes(body[8..16].try_into().unwrap());
        let name_len = u16::from_le_bytes(body[16..18].try_into().unwrap()) as usize;
        let name = std::str::from_utf8(body.get(18..18 + name_len).ok_or_else(bad)?).map_err(|_| bad())?;
        let view = SegmentView::attach(name, handle)?;
        if view.len() as u64 != size {
            return Err(TransportError::Protocol(format!("segment is {} bytes, expected {size}", view.len())));
        }
        let lib = SignedLibrary::from_bytes(container).map_err(|e| TransportError::Protocol(e.to_string()))?;
        let program = decode_program(&lib.payload).map_err(|e| TransportError::Protocol(e.to_string()))?;
        let program = verifier::verify(&program, &HelperTable::standard().ids())
            .map_err(|r| TransportError::Protocol(format!("local verification failed:\n{r}")))?;
        Ok(LoadedLibrary {
            task_id,
            handle,
            view,
            program,
        })
    }

    pub fn release(&mut self, task_id: TaskId) -> Result<(), TransportError> {
        self.request(OP_RELEASE, task_id, &[]).map(drop)
    }

    pub fn shutdown(&mut self) -> Result<(), TransportError> {
        self.request(OP_SHUTDOWN, 0, &[]).map(drop)
    }

    /// Service-wide `(copy_bytes, round_trips)`.
    pub fn stats(&mut self) -> Result<(u64, u64), TransportError> {
        let [c, r] = read_u64s::<2>(&self.request(OP_STATS, 0, &[])?)?;
        Ok((c, r))
    }

    pub fn counters(&mut self) -> Result<GateCounters, TransportError> {
        GateCounters::from_bytes(&self.request(OP_COUNTERS, 0, &[])?)
    }

    /// Baseline statfs: the path travels in the request, the record in the
    /// response.
    pub fn baseline_statfs(&mut self, path: &[u8]) -> Result<StatRecord, TransportError> {
        check_path(path)?;
        let body = self.request(OP_BASELINE_STATFS, 0, path)?;
        self.copy_bytes += (path.len() + body.len()) as u64;
        StatRecord::from_bytes(&body)
    }

    /// Ring the statfs doorbell for `thread`; no payload either way.
    pub fn doorbell_statfs(&mut self, thread: usize) -> Result<(), TransportError> {
        self.request(OP_DOORBELL_STATFS, thread as u64, &[]).map(drop)
    }

    /// Baseline ring: one record per round trip, drained by the service's
    /// per-record callback and echoed back.
    pub fn baseline_drain_one(&mut self, record: &[u8]) -> Result<Vec<u8>, TransportError> {
        let body = self.request(OP_RING_DRAIN_ONE, 0, record)?;
        self.copy_bytes += (record.len() + body.len()) as u64;
        Ok(body)
    }

    /// Ask the service to drain up to `max` records (0 = all) from the ring.
    pub fn drain_batch(&mut self, max: u64) -> Result<DrainSummary, TransportError> {
        let [records, bytes, checksum] = read_u64s::<3>(&self.request(OP_RING_DRAIN_BATCH, max, &[])?)?;
        Ok(DrainSummary { records, bytes, checksum })
    }

    pub fn pss_flush(&mut self, updates: &[Update]) -> Result<(), TransportError> {
        let payload = encode_batch(updates);
        self.request(OP_PSS_FLUSH, 0, &payload)?;
        self.copy_bytes += payload.len() as u64;
        Ok(())
    }

    /// Have the service consume `count` stress records from the ring while
    /// `produce` pushes them from this side.
    pub fn ring_stress<F, R>(&mut self, count: u64, seed: u64, max_len: u64, produce: F) -> Result<(StressReport, R), TransportError>
    where
        F: FnOnce() -> R,
    {
        self.send(OP_RING_STRESS, count, &u64s(&[seed, max_len]))?;
        let produced = produce();
        let (status, body) = self.receive()?;
        self.round_trips += 1;
        if status != Status::Ok {
            return Err(TransportError::Rejected {
                status,
                message: String::from_utf8_lossy(&body).into_owned(),
            });
        }
        let [received, mismatches, max_occupancy, violations] = read_u64s::<4>(&body)?;
        Ok((
            StressReport {
                received,
                mismatches,
                max_occupancy,
                violations,
            },
            produced,
        ))
    }
}

// ---------------------------------------------------------------------------
// Boundary operations

/// Copy-based statfs.
pub fn baseline_statfs(client: &mut Client, path: &[u8]) -> Result<StatRecord, TransportError> {
    client.baseline_statfs(path)
}

/// Zero-copy statfs: `program` (see [`crate::programs::statfs`]) places the
/// path in the VM's thread slot, a doorbell crosses the boundary, and the
/// record is read back from the return slot.
pub fn sbpf_statfs(
    client: &mut Client,
    vm: &VmInstance,
    program: &VerifiedProgram,
    path: &[u8],
) -> Result<StatRecord, TransportError> {
    let thread = vm.env().thread_id.ok_or(TransportError::NoThread)?;
    let layout = vm.env().layout;
    if thread >= layout.max_threads {
        return Err(TransportError::InvalidThread {
            thread,
            max_threads: layout.max_threads,
        });
    }
    if path.is_empty() {
        return Err(TransportError::PathTooLong(0));
    }
    vm.execute(program, Context::input(path).with_r3(STATFS_WRITE_ARGS))?;
    client.doorbell_statfs(thread)?;
    let mut out = [0u8; STAT_RECORD_SIZE];
    vm.execute(program, Context::buffer(&mut out).with_r3(STATFS_READ_RETVAL))?;
    StatRecord::from_bytes(&out)
}

/// Baseline prediction: read the shared model directly, defer the update
/// to a batch flushed across the boundary when full.
pub fn baseline_predict_update(
    client: &mut Client,
    model: &SegmentView,
    config: PssConfig,
    batch: &mut UpdateBatch,
    features: pss::Features,
    outcome: bool,
) -> Result<bool, TransportError> {
    let decision = PerceptronModel::in_segment(model, config)
        .map_err(|e| TransportError::Protocol(e.to_string()))?
        .predict(&features)
        .decision;
    if let Some(full) = batch.push(Update { features, outcome }) {
        client.pss_flush(&full)?;
    }
    Ok(decision)
}

/// Accelerated prediction: predict and train in place through the VM.
pub fn sbpf_predict_update(
    vm: &VmInstance,
    program: &VerifiedProgram,
    features: pss::Features,
    outcome: bool,
) -> Result<bool, VmError> {
    let [f1, f2, f3] = features;
    Ok(vm.execute(program, Context::args([f1, f2, f3, outcome as u64, 0]))? != 0)
}

/// Sign `program` with `key`; convenience for tests and tools.
pub fn sign_program(program: &crate::isa::BpfProgram, key: &ServiceKey) -> Result<Vec<u8>, IntegrityError> {
    Ok(integrity::sign_library(program.source_bytes(), key)?.to_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrity::KEY_LEN;
    use crate::programs;
    use crate::shmem::SEG_SIZE;

    fn key() -> ServiceKey {
        ServiceKey([7; KEY_LEN])
    }

    fn service() -> ServiceHandle {
        ServiceHandle::spawn(ServiceConfig::new(key())).unwrap()
    }

    fn load(client: &mut Client, task: TaskId, program: &crate::isa::BpfProgram) -> LoadedLibrary {
        client.load_library(task, &sign_program(program, &key()).unwrap()).unwrap()
    }

    #[test]
    fn fnv_of_slash() {
        // Frozen against an independent implementation.
        assert_eq!(fnv1a64(b"/"), 0xaf63_a24c_8601_89fe);
        let r = StatRecord::for_path(b"/");
        assert_eq!(r.path_len, 1);
        assert_eq!(r.blocks, 100_862);
        assert_eq!(StatRecord::from_bytes(&r.to_bytes()).unwrap(), r);
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn slot_views() {
        let name = format!("sbpf-slot-test-{}", uuid::Uuid::new_v4());
        let view = SegmentView::new(Arc::new(crate::shmem::ShmMapping::create(&name, SEG_SIZE).unwrap()), 1);
        let layout = ThreadSlotLayout::default();
        let v = sbpf_copy_from_user(&view, &layout, 3, 16).unwrap();
        assert_eq!((v.offset(), v.len()), (24576, 16));
        assert_eq!(
            sbpf_copy_from_user(&view, &layout, 0, 4097).err(),
            Some(SlotError::LengthExceedsSlot { len: 4097, max: 4096 })
        );
        assert_eq!(
            sbpf_copy_from_user(&view, &layout, 64, 1).err(),
            Some(SlotError::InvalidThread { thread: 64, max_threads: 64 })
        );
        sbpf_copy_to_user(&view, &layout, 0, &[1; 64]).unwrap();
        assert_eq!(view.snapshot(4096, 64).unwrap(), vec![1; 64]);
        sbpf_copy_to_user(&view, &layout, 0, &[2; 8]).unwrap();
        assert_eq!(view.snapshot(4096, 9).unwrap(), [vec![2; 8], vec![1]].concat());
        assert!(sbpf_copy_to_user(&view, &layout, 0, &[0; 4097]).is_err());
    }

    #[test]
    fn statfs_paths_agree_and_count_copies() {
        let svc = service();
        let mut c = svc.connect().unwrap();
        let lib = load(&mut c, 1, &programs::statfs());
        let vm = lib.vm(Some(0));
        let (copies0, _) = c.stats().unwrap();
        assert_eq!(copies0, 0);
        let a = baseline_statfs(&mut c, b"/usr/lib").unwrap();
        assert_eq!(c.stats().unwrap().0, 8 + 64);
        let b = sbpf_statfs(&mut c, &vm, &lib.program, b"/usr/lib").unwrap();
        assert_eq!(a, b);
        assert_eq!(c.stats().unwrap().0, 8 + 64);
        assert!(matches!(
            baseline_statfs(&mut c, &vec![b'a'; 4096]),
            Err(TransportError::PathTooLong(4096))
        ));
        assert!(matches!(
            sbpf_statfs(&mut c, &lib.vm(Some(64)), &lib.program, b"/"),
            Err(TransportError::InvalidThread { thread: 64, .. })
        ));
        assert!(matches!(
            sbpf_statfs(&mut c, &vm, &lib.program, &vec![b'a'; 4089]),
            Err(TransportError::Vm(VmError::HelperFault { id: 8, .. }))
        ));
    }

    #[test]
    fn load_gate_order() {
        let svc = service();
        let mut c = svc.connect().unwrap();
        let good = sign_program(&programs::statfs(), &key()).unwrap();
        let mut tampered = good.clone();
        *tampered.last_mut().unwrap() ^= 1;
        let err = c.load_library(5, &tampered).unwrap_err();
        assert_eq!(err.status(), Some(Status::IntegrityRejected));
        let g = c.counters().unwrap();
        assert_eq!((g.integrity_rejections, g.verifier_invocations), (1, 0));

        let backward = crate::isa::BpfProgram::from_instructions(vec![
            crate::isa::Instruction::mov64_imm(0, 0),
            crate::isa::Instruction::ja(-2),
            crate::isa::Instruction::exit(),
        ])
        .unwrap();
        let err = c.load_library(5, &sign_program(&backward, &key()).unwrap()).unwrap_err();
        assert_eq!(err.status(), Some(Status::VerificationRejected));
        assert!(svc.service().manager().is_empty());

        let lib = c.load_library(5, &good).unwrap();
        assert_eq!(svc.service().manager().len(), 1);
        // A second load reuses the segment.
        let again = c.load_library(5, &good).unwrap();
        assert_eq!(lib.handle, again.handle);
        let g = c.counters().unwrap();
        assert_eq!(g.loads_accepted, 2);
        assert_eq!(g.verifier_invocations, 3);
    }

    #[test]
    fn disconnect_releases_segments() {
        let svc = service();
        {
            let mut c = svc.connect().unwrap();
            load(&mut c, 9, &programs::statfs());
            assert_eq!(svc.service().manager().len(), 1);
        }
        let deadline = Instant::now() + Duration::from_secs(5);
        while !svc.service().manager().is_empty() {
            assert!(Instant::now() < deadline, "segment not reclaimed");
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    #[test]
    fn explicit_release_and_not_attached() {
        let svc = service();
        let mut c = svc.connect().unwrap();
        assert_eq!(c.doorbell_statfs(0).unwrap_err().status(), Some(Status::NotAttached));
        load(&mut c, 3, &programs::statfs());
        c.release(3).unwrap();
        assert_eq!(c.release(3).unwrap_err().status(), Some(Status::NotFound));
        assert_eq!(c.doorbell_statfs(0).unwrap_err().status(), Some(Status::NotAttached));
    }

    #[test]
    fn ring_drain_paths() {
        let svc = service();
        let mut c = svc.connect().unwrap();
        let (_, rt0) = c.stats().unwrap();
        for i in 0..32u32 {
            assert_eq!(c.baseline_drain_one(&i.to_le_bytes()).unwrap(), i.to_le_bytes());
        }
        assert_eq!(c.stats().unwrap(), (32 * 8, rt0 + 32));

        let lib = load(&mut c, 2, &programs::ring_push());
        let vm = lib.vm(None);
        for i in 0..100u32 {
            assert_eq!(vm.execute(&lib.program, Context::input(&i.to_le_bytes())).unwrap(), 0);
        }
        let s = c.drain_batch(0).unwrap();
        assert_eq!((s.records, s.bytes), (100, 400));
        assert_eq!(c.drain_batch(0).unwrap().records, 0);
    }

    #[test]
    fn pss_paths() {
        let svc = service();
        let mut c = svc.connect().unwrap();
        let lib = load(&mut c, 4, &programs::pss_predict_update());
        let vm = lib.vm(None);
        let cfg = PssConfig::default();
        let mut local = PerceptronModel::local(cfg);
        let (_, rt0) = c.stats().unwrap();
        let stream: Vec<Update> = pss::DriftStream::new(1, Some(500)).take(2000).collect();
        for u in &stream {
            let d = sbpf_predict_update(&vm, &lib.program, u.features, u.outcome).unwrap();
            assert_eq!(d, local.update(&u.features, u.outcome).decision);
        }
        assert_eq!(c.stats().unwrap().1, rt0);
        let seg_model = PerceptronModel::in_segment(&lib.view, cfg).unwrap();
        assert!((0..pss::TABLE_SIZE).all(|i| seg_model.weight(i) == local.weight(i)));

        // Baseline on a fresh task: updates appear only on flush.
        let lib2 = load(&mut c, 40, &programs::pss_predict_update());
        let mut batch = UpdateBatch::new(64);
        let (_, rt1) = c.stats().unwrap();
        for u in &stream[..63] {
            baseline_predict_update(&mut c, &lib2.view, cfg, &mut batch, u.features, u.outcome).unwrap();
        }
        assert_eq!(c.stats().unwrap().1, rt1);
        assert!(lib2.view.snapshot(crate::shmem::PSS_REGION_OFFSET as u64, 1 << 15).unwrap().iter().all(|&b| b == 0));
        baseline_predict_update(&mut c, &lib2.view, cfg, &mut batch, stream[63].features, stream[63].outcome).unwrap();
        assert_eq!(c.stats().unwrap().1, rt1 + 1);
        let mut replay = PerceptronModel::local(cfg);
        for u in &stream[..64] {
            replay.update(&u.features, u.outcome);
        }
        let m2 = PerceptronModel::in_segment(&lib2.view, cfg).unwrap();
        assert!((0..pss::TABLE_SIZE).all(|i| m2.weight(i) == replay.weight(i)));
    }

    #[test]
    fn ring_stress_in_process() {
        let svc = service();
        let mut c = svc.connect().unwrap();
        let lib = load(&mut c, 6, &programs::ring_push());
        let ring = SpscRing::in_segment(&lib.view).unwrap();
        let (report, ()) = c
            .ring_stress(20_000, 11, 4096, || {
                let mut buf = Vec::new();
                for seq in 0..20_000 {
                    stress_payload(11, seq, 4096, &mut buf);
                    while ring.push(&buf).is_err() {
                        std::thread::yield_now();
                    }
                }
            })
            .unwrap();
        assert_eq!(report.received, 20_000);
        assert_eq!(report.mismatches, 0);
        assert_eq!(report.violations, 0);
        assert!(report.max_occupancy <= ring.capacity() as u64);
    }

    #[test]
    fn closed_service_is_channel_closed() {
        let svc = service();
        let mut c = svc.connect().unwrap();
        svc.shutdown();
        let mut err = None;
        for _ in 0..3 {
            if let Err(e) = c.baseline_drain_one(&[1, 2, 3, 4]) {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(TransportError::ChannelClosed)), "{err:?}");
    }
}
