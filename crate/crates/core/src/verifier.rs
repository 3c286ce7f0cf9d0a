// SPDX-License-Identifier: Apache-2.0

//! Static verification of BPF programs.
//!
//! Passes run in a fixed order:
//!
//! 1. instruction validation (opcodes, registers, frame-pointer writes,
//!    helper IDs, jumps into wide-load continuations),
//! 2. control flow (targets in range, forward-only jumps, every path ends
//!    in `EXIT`),
//! 3. safety (register initialization dataflow, stack-only memory access),
//! 4. resource usage (slot count, stack footprint, helper call count).
//!
//! The dataflow pass only runs on a well-formed forward-only CFG. Because
//! every edge points forward, slot order is a topological order and one
//! sweep reaches the fixed point.

use std::collections::BTreeSet;
use std::fmt;

use crate::isa::{
    AluOp, BpfProgram, Instruction, Kind, Source, FRAME_POINTER, MAX_PROGRAM_LEN, MAX_REGISTER,
};

/// Size of the per-execution stack in bytes.
pub const STACK_SIZE: usize = 512;
/// Upper bound on statically present `CALL` instructions.
pub const MAX_HELPER_CALLS: usize = 4096;

/// Registers initialized at entry: r1-r5 (helper-argument convention) and r10.
const ENTRY_REGS: u16 = 0b100_0011_1110;
const CALLER_SAVED: u16 = 0b11_1110;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    InvalidInstruction,
    OutOfBoundsJump,
    BackwardJump,
    UnreachableExit,
    UninitializedRegister,
    StackOutOfBounds,
    IllegalMemoryAccess,
    WriteToFramePointer,
    UnknownHelper,
    ProgramTooLong,
    TooManyHelperCalls,
    JumpIntoWideLoad,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub slot: usize,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.slot, self.kind, self.message)
    }
}

/// Outcome of a verification run. `accepted` holds iff `violations` is empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifierReport {
    pub accepted: bool,
    pub violations: Vec<Violation>,
    pub instruction_count: usize,
}

impl VerifierReport {
    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

impl fmt::Display for VerifierReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for VerifierReport {}

/// A program that passed every verifier check. Only [`verify`] builds one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifiedProgram {
    program: BpfProgram,
    helper_ids_used: BTreeSet<u32>,
    max_stack_depth: usize,
}

impl VerifiedProgram {
    pub fn program(&self) -> &BpfProgram {
        &self.program
    }

    pub fn instructions(&self) -> &[Instruction] {
        self.program.instructions()
    }

    pub fn helper_ids_used(&self) -> &BTreeSet<u32> {
        &self.helper_ids_used
    }

    pub fn max_stack_depth(&self) -> usize {
        self.max_stack_depth
    }
}

/// Verify `program` against the set of registered helper IDs.
pub fn verify(
    program: &BpfProgram,
    registered_helpers: &BTreeSet<u32>,
) -> Result<VerifiedProgram, VerifierReport> {
    let analysis = Analysis::run(program.instructions(), registered_helpers);
    if analysis.violations.is_empty() {
        Ok(VerifiedProgram {
            program: program.clone(),
            helper_ids_used: analysis.helpers_used,
            max_stack_depth: analysis.max_stack_depth,
        })
    } else {
        Err(analysis.into_report(program.len()))
    }
}

/// Run the checks and always return the report, accepted or not.
pub fn report(program: &BpfProgram, registered_helpers: &BTreeSet<u32>) -> VerifierReport {
    Analysis::run(program.instructions(), registered_helpers).into_report(program.len())
}

#[derive(Default)]
struct Analysis {
    violations: Vec<Violation>,
    helpers_used: BTreeSet<u32>,
    max_stack_depth: usize,
}

impl Analysis {
    fn run(insns: &[Instruction], helpers: &BTreeSet<u32>) -> Self {
        let mut a = Analysis::default();
        let continuation = continuation_slots(insns);
        a.validate_instructions(insns, &continuation, helpers);
        let cfg_ok = a.check_control_flow(insns, &continuation);
        if cfg_ok {
            a.check_safety(insns, &continuation);
        }
        a.check_resources(insns, &continuation);
        a
    }

    fn into_report(self, instruction_count: usize) -> VerifierReport {
        VerifierReport {
            accepted: self.violations.is_empty(),
            violations: self.violations,
            instruction_count,
        }
    }

    fn push(&mut self, slot: usize, kind: ViolationKind, message: impl Into<String>) {
        self.violations.push(Violation {
            slot,
            kind,
            message: message.into(),
        });
    }

    fn validate_instructions(
        &mut self,
        insns: &[Instruction],
        continuation: &[bool],
        helpers: &BTreeSet<u32>,
    ) {
        use ViolationKind::*;
        for (pc, insn) in insns.iter().enumerate() {
            if continuation[pc] {
                continue;
            }
            let Some(kind) = insn.kind() else {
                self.push(pc, InvalidInstruction, format!("opcode {:#04x}", insn.opcode));
                continue;
            };
            if insn.dst > MAX_REGISTER || insn.src > MAX_REGISTER {
                self.push(pc, InvalidInstruction, "register index out of range");
                continue;
            }
            let writes_dst = matches!(
                kind,
                Kind::Alu { .. } | Kind::Load { .. } | Kind::LoadImm64
            );
            if writes_dst && insn.dst == FRAME_POINTER {
                self.push(pc, WriteToFramePointer, "r10 is read-only");
            }
            match kind {
                Kind::Call => {
                    let id = insn.imm as u32;
                    if insn.src != 0 || insn.dst != 0 || insn.offset != 0 {
                        self.push(pc, InvalidInstruction, "only helper calls are supported");
                    } else if helpers.contains(&id) {
                        self.helpers_used.insert(id);
                    } else {
                        self.push(pc, UnknownHelper, format!("helper {id} is not registered"));
                    }
                }
                Kind::LoadImm64 if pc + 1 >= insns.len() => {
                    self.push(pc, InvalidInstruction, "truncated wide-immediate load");
                }
                Kind::Jump | Kind::CondJump { .. } => {
                    if let Some(t) = jump_target(pc, insn) {
                        if t < insns.len() && continuation[t] {
                            self.push(
                                pc,
                                JumpIntoWideLoad,
                                format!("target {t} is a wide-load continuation"),
                            );
                        }
                    }
                }
                _ => {}
            }
        }
    }

    /// Returns true when the CFG is a well-formed forward-only graph.
    fn check_control_flow(&mut self, insns: &[Instruction], continuation: &[bool]) -> bool {
        use ViolationKind::*;
        let len = insns.len();
        let before = self.violations.len();
        for (pc, insn) in insns.iter().enumerate() {
            if continuation[pc] || !matches!(insn.kind(), Some(Kind::Jump | Kind::CondJump { .. }))
            {
                continue;
            }
            if insn.offset < 0 {
                self.push(pc, BackwardJump, format!("offset {}", insn.offset));
            } else {
                match jump_target(pc, insn) {
                    Some(t) if t < len => {}
                    _ => self.push(
                        pc,
                        OutOfBoundsJump,
                        format!("target {} outside [0, {len})", pc as i64 + 1 + insn.offset as i64),
                    ),
                }
            }
        }

        let mut reachable = vec![false; len];
        reachable[0] = true;
        for pc in 0..len {
            if !reachable[pc] || continuation[pc] {
                continue;
            }
            let (succ, falls_off) = successors(pc, &insns[pc], len);
            for s in succ.into_iter().flatten() {
                reachable[s] = true;
            }
            if falls_off {
                self.push(pc, UnreachableExit, "execution falls off the end of the program");
            }
        }
        self.violations.len() == before
    }

    fn check_safety(&mut self, insns: &[Instruction], continuation: &[bool]) {
        use ViolationKind::*;
        let len = insns.len();
        let mut state: Vec<Option<u16>> = vec![None; len];
        state[0] = Some(ENTRY_REGS);

        for pc in 0..len {
            let Some(mut regs) = state[pc] else { continue };
            if continuation[pc] {
                continue;
            }
            let insn = &insns[pc];
            let Some(kind) = insn.kind() else { continue };
            let mut reads: Vec<u8> = Vec::with_capacity(2);

            match kind {
                Kind::Alu { op, src, .. } => {
                    match (op, src) {
                        (AluOp::Mov, Source::Imm) => {}
                        (AluOp::Mov, Source::Reg) => reads.push(insn.src),
                        (AluOp::Neg, _) | (_, Source::Imm) => reads.push(insn.dst),
                        (_, Source::Reg) => reads.extend([insn.dst, insn.src]),
                    }
                }
                Kind::CondJump { src, .. } => {
                    reads.push(insn.dst);
                    if src == Source::Reg {
                        reads.push(insn.src);
                    }
                }
                Kind::Exit => reads.push(0),
                Kind::Load { size } => {
                    self.check_stack_access(pc, insn.src, insn.offset, size.bytes());
                }
                Kind::StoreImm { size } => {
                    self.check_stack_access(pc, insn.dst, insn.offset, size.bytes());
                }
                Kind::StoreReg { size } => {
                    self.check_stack_access(pc, insn.dst, insn.offset, size.bytes());
                    reads.push(insn.src);
                }
                Kind::Jump | Kind::Call | Kind::LoadImm64 => {}
            }

            for r in reads {
                if regs & (1 << r) == 0 {
                    self.push(pc, UninitializedRegister, format!("r{r} read before write"));
                    // report once per path
                    regs |= 1 << r;
                }
            }

            match kind {
                Kind::Alu { .. } | Kind::Load { .. } | Kind::LoadImm64 => regs |= 1 << insn.dst,
                Kind::Call => regs = (regs & !CALLER_SAVED) | 1,
                _ => {}
            }

            let (succ, _) = successors(pc, insn, len);
            for s in succ.into_iter().flatten() {
                state[s] = Some(state[s].map_or(regs, |prev| prev & regs));
            }
        }
    }

    fn check_stack_access(&mut self, pc: usize, base: u8, offset: i16, size: usize) {
        if base != FRAME_POINTER {
            self.push(
                pc,
                ViolationKind::IllegalMemoryAccess,
                format!("memory access through r{base}; only r10-relative stack access is allowed"),
            );
            return;
        }
        let lo = offset as i64;
        let hi = lo + size as i64;
        if lo < -(STACK_SIZE as i64) || hi > 0 {
            self.push(
                pc,
                ViolationKind::StackOutOfBounds,
                format!("access [r10{lo:+}, r10{hi:+}) outside [r10-{STACK_SIZE}, r10)"),
            );
            return;
        }
        self.max_stack_depth = self.max_stack_depth.max((-lo) as usize);
    }

    fn check_resources(&mut self, insns: &[Instruction], continuation: &[bool]) {
        if insns.len() > MAX_PROGRAM_LEN {
            self.push(
                MAX_PROGRAM_LEN,
                ViolationKind::ProgramTooLong,
                format!("{} slots exceeds limit of {MAX_PROGRAM_LEN}", insns.len()),
            );
        }
        let calls = insns
            .iter()
            .zip(continuation)
            .filter(|(i, c)| !**c && i.kind() == Some(Kind::Call))
            .count();
        if calls > MAX_HELPER_CALLS {
            self.push(
                0,
                ViolationKind::TooManyHelperCalls,
                format!("{calls} helper calls exceeds limit of {MAX_HELPER_CALLS}"),
            );
        }
        debug_assert!(self.max_stack_depth <= STACK_SIZE);
    }
}

fn continuation_slots(insns: &[Instruction]) -> Vec<bool> {
    let mut cont = vec![false; insns.len()];
    let mut pc = 0;
    while pc < insns.len() {
        if insns[pc].kind() == Some(Kind::LoadImm64) && pc + 1 < insns.len() {
            cont[pc + 1] = true;
            pc += 2;
        } else {
            pc += 1;
        }
    }
    cont
}

fn jump_target(pc: usize, insn: &Instruction) -> Option<usize> {
    usize::try_from(pc as i64 + 1 + insn.offset as i64).ok()
}

/// In-range successors of `pc`, plus whether some successor lies past the end.
/// Out-of-range or backward jump targets are dropped; the control flow pass
/// reports them.
fn successors(pc: usize, insn: &Instruction, len: usize) -> ([Option<usize>; 2], bool) {
    let in_range = |t: usize| (t < len).then_some(t);
    let forward = |t: Option<usize>| t.filter(|&t| t > pc).and_then(in_range);
    match insn.kind() {
        Some(Kind::Exit) | None => ([None, None], false),
        Some(Kind::Jump) => ([forward(jump_target(pc, insn)), None], false),
        Some(Kind::CondJump { .. }) => (
            [in_range(pc + 1), forward(jump_target(pc, insn))],
            pc + 1 >= len,
        ),
        Some(Kind::LoadImm64) => ([in_range(pc + 2), None], pc + 2 >= len),
        Some(_) => ([in_range(pc + 1), None], pc + 1 >= len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::*;
    use ViolationKind::*;

    fn prog(insns: &[Instruction]) -> BpfProgram {
        BpfProgram::from_instructions(insns.to_vec()).unwrap()
    }

    fn rejected(insns: &[Instruction]) -> VerifierReport {
        verify(&prog(insns), &BTreeSet::new()).unwrap_err()
    }

    #[test]
    fn minimal_program_is_accepted() {
        let v = verify(
            &prog(&[Instruction::mov64_imm(0, 0), Instruction::exit()]),
            &BTreeSet::new(),
        )
        .unwrap();
        assert_eq!(v.max_stack_depth(), 0);
        assert!(v.helper_ids_used().is_empty());
    }

    #[test]
    fn out_of_bounds_jump() {
        let r = rejected(&[Instruction::ja(5), Instruction::exit()]);
        assert!(!r.accepted);
        assert_eq!(r.violations[0].slot, 0);
        assert_eq!(r.violations[0].kind, OutOfBoundsJump);
        assert_eq!(r.violations.len(), 1);
    }

    #[test]
    fn backward_jump() {
        let r = rejected(&[
            Instruction::mov64_imm(0, 0),
            Instruction::ja(-2),
            Instruction::exit(),
        ]);
        assert_eq!(r.violations[0].slot, 1);
        assert_eq!(r.violations[0].kind, BackwardJump);
        // self loop
        assert!(rejected(&[Instruction::ja(-1), Instruction::exit()]).has(BackwardJump));
    }

    #[test]
    fn uninitialized_registers() {
        // r3 is an entry argument register, so only r0 is flagged
        let r = rejected(&[Instruction::alu_reg(ADD64_REG, 0, 3), Instruction::exit()]);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].message, "r0 read before write");

        let r = rejected(&[Instruction::alu_reg(ADD64_REG, 0, 6), Instruction::exit()]);
        let regs: Vec<_> = r.violations.iter().map(|v| (v.slot, v.kind)).collect();
        assert_eq!(
            regs,
            vec![(0, UninitializedRegister), (0, UninitializedRegister)]
        );
        // EXIT with r0 never written
        let r = rejected(&[Instruction::exit()]);
        assert_eq!(r.violations[0].kind, UninitializedRegister);
    }

    #[test]
    fn helper_call_clobbers_arguments() {
        let helpers = BTreeSet::from([1]);
        let p = prog(&[
            Instruction::call(1),
            Instruction::mov64_reg(0, 1),
            Instruction::exit(),
        ]);
        let r = verify(&p, &helpers).unwrap_err();
        assert_eq!(r.violations[0].slot, 1);
        assert_eq!(r.violations[0].kind, UninitializedRegister);

        let p = prog(&[Instruction::call(1), Instruction::exit()]);
        assert!(verify(&p, &helpers).is_ok());
    }

    #[test]
    fn join_points_intersect() {
        // r6 only written on the fall-through path
        let r = rejected(&[
            Instruction::new(JEQ_IMM, 1, 0, 1, 0),
            Instruction::mov64_imm(6, 1),
            Instruction::mov64_reg(0, 6),
            Instruction::exit(),
        ]);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].slot, 2);
    }

    #[test]
    fn stack_bounds() {
        let r = rejected(&[
            Instruction::new(STX_DW_REG, 10, 1, -520, 0),
            Instruction::mov64_imm(0, 0),
            Instruction::exit(),
        ]);
        assert_eq!(r.violations.len(), 1);
        assert_eq!((r.violations[0].slot, r.violations[0].kind), (0, StackOutOfBounds));

        // straddles the top of the stack
        assert!(rejected(&[
            Instruction::new(STX_DW_REG, 10, 1, -4, 0),
            Instruction::mov64_imm(0, 0),
            Instruction::exit(),
        ])
        .has(StackOutOfBounds));

        let ok = verify(
            &prog(&[
                Instruction::new(STX_DW_REG, 10, 1, -512, 0),
                Instruction::new(LDX_B_REG, 0, 10, -1, 0),
                Instruction::exit(),
            ]),
            &BTreeSet::new(),
        )
        .unwrap();
        assert_eq!(ok.max_stack_depth(), 512);
    }

    #[test]
    fn non_stack_memory_is_illegal() {
        let r = rejected(&[Instruction::new(LDX_DW_REG, 0, 1, 0, 0), Instruction::exit()]);
        assert_eq!(r.violations[0].kind, IllegalMemoryAccess);
        let r = rejected(&[
            Instruction::new(ST_W_IMM, 2, 0, 0, 7),
            Instruction::mov64_imm(0, 0),
            Instruction::exit(),
        ]);
        assert_eq!(r.violations[0].kind, IllegalMemoryAccess);
    }

    #[test]
    fn frame_pointer_is_read_only() {
        let r = rejected(&[
            Instruction::alu_imm(ADD64_IMM, 10, 8),
            Instruction::mov64_imm(0, 0),
            Instruction::exit(),
        ]);
        assert_eq!(r.violations[0].kind, WriteToFramePointer);
    }

    #[test]
    fn unknown_helper() {
        let r = rejected(&[Instruction::call(9), Instruction::exit()]);
        assert_eq!(r.violations[0].kind, UnknownHelper);
    }

    #[test]
    fn jump_into_wide_load() {
        let [a, b] = Instruction::ld_dw_imm(0, 1);
        let r = rejected(&[Instruction::new(JEQ_IMM, 1, 0, 1, 0), a, b, Instruction::exit()]);
        assert!(r.has(JumpIntoWideLoad));
    }

    #[test]
    fn falling_off_the_end() {
        let r = rejected(&[Instruction::mov64_imm(0, 0)]);
        assert_eq!(r.violations[0].kind, UnreachableExit);
        let r = rejected(&[
            Instruction::mov64_imm(0, 0),
            Instruction::new(JEQ_IMM, 0, 0, 0, 0),
        ]);
        assert!(r.has(UnreachableExit));
    }

    #[test]
    fn program_too_long() {
        let mut insns = vec![Instruction::mov64_imm(0, 0); MAX_PROGRAM_LEN + 1];
        insns.push(Instruction::exit());
        let r = rejected(&insns);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].kind, ProgramTooLong);
        assert_eq!(r.instruction_count, MAX_PROGRAM_LEN + 2);
    }

    #[test]
    fn report_lines() {
        let r = report(&prog(&[Instruction::ja(5), Instruction::exit()]), &BTreeSet::new());
        let text = r.to_string();
        assert!(text.starts_with("0\tOutOfBoundsJump\t"), "{text}");
    }
}
