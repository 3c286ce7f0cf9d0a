// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::path::PathBuf;

use sbpf_core::isa::decode_program;
use sbpf_core::verifier;
use sbpf_core::vm::{Context, HelperEnv, VmInstance};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/conformance")
}

/// Sorted `(name, bytes)` of every conformance program.
pub fn conformance_programs() -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(fixture_dir())
        .expect("fixture dir")
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "bpf").then(|| {
                let name = p.file_stem().unwrap().to_string_lossy().into_owned();
                (name, std::fs::read(&p).unwrap())
            })
        })
        .collect();
    out.sort();
    out
}

pub fn run_ours(bytes: &[u8]) -> Result<u64, String> {
    let program = decode_program(bytes).map_err(|e| e.to_string())?;
    let vm = VmInstance::standard(HelperEnv::default());
    let verified = verifier::verify(&program, &vm.helpers().ids()).map_err(|r| r.to_string())?;
    vm.execute(&verified, Context::word(0, 0)).map_err(|e| e.to_string())
}

pub fn run_reference(bytes: &[u8]) -> Result<u64, String> {
    let vm = rbpf::EbpfVmNoData::new(Some(bytes)).map_err(|e| e.to_string())?;
    vm.execute_program().map_err(|e| e.to_string())
}

pub struct Mismatch {
    pub name: String,
    pub ours: Result<u64, String>,
    pub reference: Result<u64, String>,
}

/// Runs every fixture on both interpreters; returns (total, mismatches).
pub fn conformance_check() -> (usize, Vec<Mismatch>) {
    let programs = conformance_programs();
    let mut bad = Vec::new();
    for (name, bytes) in &programs {
        let ours = run_ours(bytes);
        let reference = run_reference(bytes);
        let same = matches!((&ours, &reference), (Ok(a), Ok(b)) if a == b);
        if !same {
            bad.push(Mismatch {
                name: name.clone(),
                ours,
                reference,
            });
        }
    }
    (programs.len(), bad)
}

use rand::Rng;
use sbpf_core::isa::{Instruction, Kind, LD_DW_IMM};
use sbpf_core::vm::HelperTable;

/// Every opcode the decoder accepts as the first slot of an instruction.
pub fn supported_opcodes() -> Vec<u8> {
    (0..=u8::MAX).filter(|&op| Kind::of(op).is_some()).collect()
}

/// A random instruction sequence of at most `max_slots` slots over the
/// supported subset, biased toward programs the verifier might accept.
pub fn random_program<R: Rng>(rng: &mut R, max_slots: usize, ops: &[u8]) -> Vec<Instruction> {
    let target = rng.gen_range(1..=max_slots);
    let mut v = Vec::with_capacity(target);
    if rng.gen_bool(0.5) {
        v.push(Instruction::mov64_imm(0, rng.gen_range(-4..64)));
    }
    while v.len() < target {
        let op = ops[rng.gen_range(0..ops.len())];
        if op == LD_DW_IMM {
            if v.len() + 2 > target {
                continue;
            }
            v.extend(Instruction::ld_dw_imm(rng.gen_range(0..=10), rng.gen()));
            continue;
        }
        let kind = Kind::of(op).unwrap();
        let reg = |rng: &mut R| if rng.gen_bool(0.8) { rng.gen_range(0..=5) } else { rng.gen_range(0..=10) };
        let (dst, src, offset) = match kind {
            Kind::Load { .. } | Kind::StoreImm { .. } | Kind::StoreReg { .. } => {
                let base = if rng.gen_bool(0.8) { 10 } else { reg(rng) };
                let off = if rng.gen_bool(0.85) { -8 * rng.gen_range(1..=64) } else { rng.gen_range(-600..16) };
                match kind {
                    Kind::Load { .. } => (reg(rng), base, off),
                    _ => (base, reg(rng), off),
                }
            }
            Kind::Jump | Kind::CondJump { .. } => (reg(rng), reg(rng), rng.gen_range(-3..6)),
            _ => (reg(rng), reg(rng), 0),
        };
        let imm = match kind {
            Kind::Call => rng.gen_range(0..12),
            _ if rng.gen_bool(0.7) => rng.gen_range(-8..64),
            _ => rng.gen(),
        };
        v.push(Instruction::new(op, dst, src, offset as i16, imm));
    }
    if rng.gen_bool(0.7) {
        if let Some(last) = v.last_mut() {
            if last.opcode != 0 {
                *last = Instruction::exit();
            }
        }
    }
    v
}

/// Helpers 1-9 as pure functions of their arguments.
pub fn pure_helpers() -> HelperTable {
    let mut t = HelperTable::new();
    for id in 1..=9u32 {
        t.register(id, "pure", 5, move |c| {
            Ok(c.args.iter().fold(id as u64, |acc, a| acc.rotate_left(7) ^ a))
        })
        .unwrap();
    }
    t
}
