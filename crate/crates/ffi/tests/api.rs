// SPDX-License-Identifier: Apache-2.0

use std::ffi::{CStr, CString};
use std::ptr;

use sbpf_core::integrity::{ServiceKey, KEY_LEN};
use sbpf_core::isa::{encode_program, Instruction};
use sbpf_core::programs;
use sbpf_core::transport::{sign_program, ServiceConfig, ServiceHandle, StatRecord};
use sbpf_ffi::*;

fn code(insns: &[Instruction]) -> Vec<u8> {
    encode_program(insns).unwrap()
}

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    unsafe {
        sbpf_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn load_and_execute() {
    let bytes = code(&[
        Instruction::mov64_reg(0, 1),
        Instruction::alu_reg(sbpf_core::isa::ADD64_REG, 0, 2),
        Instruction::exit(),
    ]);
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(sbpf_program_load(bytes.as_ptr(), bytes.len(), &mut p), SbpfStatus::Ok);
        assert_eq!(sbpf_program_len(p), 3);
        let vm = sbpf_vm_new();
        let args = [40u64, 2, 0, 0, 0];
        let mut r0 = 0;
        assert_eq!(sbpf_vm_execute(vm, p, args.as_ptr(), &mut r0), SbpfStatus::Ok);
        assert_eq!(r0, 42);
        assert_eq!(sbpf_vm_execute(vm, p, ptr::null(), &mut r0), SbpfStatus::Ok);
        assert_eq!(r0, 0);
        sbpf_vm_free(vm);
        sbpf_program_free(p);
    }
}

#[test]
fn rejections_map_to_codes() {
    unsafe {
        let mut p = ptr::null_mut();
        let junk = [0xffu8; 8];
        assert_eq!(sbpf_program_load(junk.as_ptr(), 8, &mut p), SbpfStatus::DecodeFailed);
        assert!(p.is_null());
        let bad = code(&[Instruction::exit()]);
        assert_eq!(sbpf_program_load(bad.as_ptr(), bad.len(), &mut p), SbpfStatus::VerificationFailed);
        assert!(last_error().contains("UninitializedRegister"), "{}", last_error());
        assert_eq!(sbpf_program_load(ptr::null(), 8, &mut p), SbpfStatus::NullPointer);
        assert_eq!(sbpf_program_load(bad.as_ptr(), bad.len(), ptr::null_mut()), SbpfStatus::NullPointer);

        let mut r0 = 0;
        assert_eq!(sbpf_vm_execute(ptr::null(), ptr::null(), ptr::null(), &mut r0), SbpfStatus::NullPointer);
        // Helper call with no segment bound faults at run time.
        let h = code(&[Instruction::call(1), Instruction::exit()]);
        assert_eq!(sbpf_program_load(h.as_ptr(), h.len(), &mut p), SbpfStatus::Ok);
        let vm = sbpf_vm_new();
        assert_eq!(sbpf_vm_execute(vm, p, ptr::null(), &mut r0), SbpfStatus::ExecutionFailed);
        sbpf_vm_free(vm);
        sbpf_program_free(p);
    }
}

#[test]
fn sign_and_verify() {
    let key = [7u8; KEY_LEN];
    let other = [8u8; KEY_LEN];
    let payload = code(&[Instruction::mov64_imm(0, 1), Instruction::exit()]);
    unsafe {
        let mut need = 0;
        assert_eq!(
            sbpf_library_sign(key.as_ptr(), payload.as_ptr(), payload.len(), ptr::null_mut(), 0, &mut need),
            SbpfStatus::BufferTooSmall
        );
        let mut buf = vec![0u8; need];
        assert_eq!(
            sbpf_library_sign(key.as_ptr(), payload.as_ptr(), payload.len(), buf.as_mut_ptr(), buf.len(), &mut need),
            SbpfStatus::Ok
        );
        assert_eq!(buf, sign_program(&sbpf_core::isa::decode_program(&payload).unwrap(), &ServiceKey(key)).unwrap());
        assert_eq!(sbpf_library_verify(key.as_ptr(), buf.as_ptr(), buf.len()), SbpfStatus::Ok);
        assert_eq!(sbpf_library_verify(other.as_ptr(), buf.as_ptr(), buf.len()), SbpfStatus::IntegrityFailed);
        buf[12] ^= 1;
        assert_eq!(sbpf_library_verify(key.as_ptr(), buf.as_ptr(), buf.len()), SbpfStatus::IntegrityFailed);
    }
}

#[test]
fn perceptron_learns() {
    unsafe {
        let m = sbpf_pss_new(48);
        let f = [10u64, 20, 30];
        let mut d = true;
        let mut margin = 99;
        assert_eq!(sbpf_pss_predict(m, f.as_ptr(), &mut d, &mut margin), SbpfStatus::Ok);
        assert_eq!(margin, 0);
        for _ in 0..10 {
            assert_eq!(sbpf_pss_update(m, f.as_ptr(), false, ptr::null_mut()), SbpfStatus::Ok);
        }
        assert_eq!(sbpf_pss_predict(m, f.as_ptr(), &mut d, ptr::null_mut()), SbpfStatus::Ok);
        assert!(!d);
        let idx = sbpf_pss_hash_index(10, 1);
        assert_eq!(idx, sbpf_core::pss::hash_index(10, 1));
        assert!(sbpf_pss_weight(m, idx) < 0);
        assert_eq!(sbpf_pss_weight(m, usize::MAX), 0);
        sbpf_pss_free(m);
    }
}

#[test]
fn client_statfs_paths_agree() {
    let key = ServiceKey([3u8; KEY_LEN]);
    let svc = ServiceHandle::spawn(ServiceConfig::new(key.clone())).unwrap();
    let container = sign_program(&programs::statfs(), &key).unwrap();
    let sock = CString::new(svc.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(sbpf_client_connect(sock.as_ptr(), &mut c), SbpfStatus::Ok);
        let mut lib = ptr::null_mut();
        assert_eq!(
            sbpf_client_load(c, 9, container.as_ptr(), container.len(), 0, &mut lib),
            SbpfStatus::Ok
        );
        assert_ne!(sbpf_library_handle(lib), 0);
        let path = b"/var/lib/sbpf";
        let mut a = SbpfStatRecord::default();
        let mut b = SbpfStatRecord::default();
        assert_eq!(sbpf_client_baseline_statfs(c, path.as_ptr(), path.len(), &mut a), SbpfStatus::Ok);
        let (mut copies0, mut trips) = (0, 0);
        assert_eq!(sbpf_client_stats(c, &mut copies0, &mut trips), SbpfStatus::Ok);
        assert_eq!(sbpf_library_statfs(c, lib, path.as_ptr(), path.len(), &mut b), SbpfStatus::Ok);
        let mut copies1 = 0;
        assert_eq!(sbpf_client_stats(c, &mut copies1, &mut trips), SbpfStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(a, StatRecord::for_path(path).into());
        assert_eq!(copies1, copies0);

        let mut forged = container.clone();
        forged[20] ^= 0x40;
        let mut lib2 = ptr::null_mut();
        assert_eq!(
            sbpf_client_load(c, 10, forged.as_ptr(), forged.len(), 0, &mut lib2),
            SbpfStatus::IntegrityFailed
        );
        assert!(lib2.is_null());
        sbpf_library_free(lib);
        sbpf_client_free(c);

        let missing = CString::new("/nonexistent/sbpf.sock").unwrap();
        assert_eq!(sbpf_client_connect(missing.as_ptr(), &mut c), SbpfStatus::TransportFailed);
        assert!(c.is_null());
    }
}
