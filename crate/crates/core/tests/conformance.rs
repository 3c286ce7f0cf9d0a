// SPDX-License-Identifier: Apache-2.0

mod common;

use common::*;
use sbpf_core::isa::{decode_program, encode_program, LD_DW_IMM};

#[test]
fn suite_is_large_enough() {
    assert!(conformance_programs().len() >= 20);
}

#[test]
fn r0_matches_reference_interpreter() {
    let (total, bad) = conformance_check();
    for m in &bad {
        eprintln!("{}: ours {:?} reference {:?}", m.name, m.ours, m.reference);
    }
    assert!(bad.is_empty(), "{} of {total} programs diverge", bad.len());
}

#[test]
fn spot_values() {
    let get = |name: &str| {
        let (_, b) = conformance_programs().into_iter().find(|(n, _)| n == name).unwrap();
        run_ours(&b).unwrap()
    };
    assert_eq!(get("01_add_imm"), 5);
    assert_eq!(get("02_div64_reg_zero"), 0);
    assert_eq!(get("03_mod64_reg_zero"), 77);
    assert_eq!(get("06_lddw"), 0x1122_3344_5566_7788);
    assert_eq!(get("08_add32_zero_extends"), 0xffff_ffff);
    assert_eq!(get("09_lsh64_reg_masked"), 2);
    assert_eq!(get("23_st_dw_imm_sign_extends"), (-2i64) as u64);
}

#[test]
fn encode_decode_is_identity_on_suite() {
    for (name, bytes) in conformance_programs() {
        let p = decode_program(&bytes).unwrap();
        assert_eq!(encode_program(p.instructions()).unwrap(), bytes, "{name}");
    }
}

#[test]
fn decode_agrees_with_reference_disassembler() {
    for (name, bytes) in conformance_programs() {
        let ours = decode_program(&bytes).unwrap();
        let theirs = rbpf::disassembler::to_insn_vec(&bytes);
        let mut it = ours.instructions().iter();
        let mut n = 0;
        while let Some(i) = it.next() {
            let h = &theirs[n];
            n += 1;
            assert_eq!((i.opcode, i.dst, i.src, i.offset), (h.opc, h.dst, h.src, h.off), "{name}");
            if i.opcode == LD_DW_IMM {
                let hi = it.next().unwrap();
                let wide = (i.imm as u32 as u64) | ((hi.imm as u32 as u64) << 32);
                assert_eq!(wide as i64, h.imm, "{name}");
            } else {
                assert_eq!(i.imm as i64, h.imm, "{name}");
            }
        }
        assert_eq!(n, theirs.len(), "{name}");
    }
}

#[test]
fn mov64_imm_bytes() {
    let p = decode_program(&[0xb7, 0x01, 0, 0, 0x2a, 0, 0, 0, 0x95, 0, 0, 0, 0, 0, 0, 0]).unwrap();
    let i = p.instructions()[0];
    assert_eq!((i.opcode, i.dst, i.src, i.offset, i.imm), (0xb7, 1, 0, 0, 42));
}

#[test]
fn zero_opcode_is_rejected() {
    assert!(decode_program(&[0u8; 8]).is_err());
}

fn divergent(name: &str) -> Vec<u8> {
    std::fs::read(fixture_dir().join(format!("../divergent/{name}.bpf"))).unwrap()
}

#[test]
fn jump_immediates_sign_extend() {
    let b = divergent("jle_imm_sign_extends");
    assert_eq!(run_ours(&b), Ok(2));
    // The reference zero-extends the immediate and takes the other branch.
    assert_eq!(run_reference(&b), Ok(3));
}

#[test]
fn mod32_by_zero_zero_extends() {
    let b = divergent("mod32_zero_zero_extends");
    assert_eq!(run_ours(&b), Ok(9));
    assert_eq!(run_reference(&b), Ok(0x0000_0007_0000_0009));
}
