// SPDX-License-Identifier: Apache-2.0

//! Interpreter for verified programs.
//!
//! The VM sees two address windows, both at fixed virtual addresses that
//! are unrelated to where the bytes actually live:
//!
//! * the 512-byte stack, `[STACK_BASE, STACK_TOP)`; `r10` holds `STACK_TOP`,
//! * the caller's context buffer, `[CTX_BASE, CTX_BASE + len)`.
//!
//! Load and store instructions may only touch the stack. Helpers accept
//! addresses in either window and reach the shared segment only through
//! segment-relative offsets.

mod helpers;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

pub use helpers::*;

use crate::isa::{AluOp, Instruction, JmpCond, Kind, MemSize, Source, Width, FRAME_POINTER};
use crate::shmem::{SegmentView, ThreadSlotLayout};
use crate::verifier::{VerifiedProgram, STACK_SIZE};

pub const STACK_BASE: u64 = 0x1_0000_0000;
pub const STACK_TOP: u64 = STACK_BASE + STACK_SIZE as u64;
pub const CTX_BASE: u64 = 0x2_0000_0000;
pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("step limit of {0} instructions exceeded")]
    StepLimitExceeded(u64),
    #[error("helper {0} is not registered")]
    UnknownHelper(u32),
    #[error("helper {id} faulted: {cause}")]
    HelperFault { id: u32, cause: HelperFault },
    #[error("memory fault at slot {pc}: address {addr:#x}, {len} bytes")]
    MemoryFault { pc: usize, addr: u64, len: usize },
    #[error("program counter {0} outside program")]
    PcOutOfRange(usize),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HelperTableError {
    #[error("helper id {0} already registered")]
    DuplicateHelper(u32),
    #[error("helper id 0 is reserved")]
    ReservedId,
}

/// The caller's context buffer; helpers may write only to a mutable one.
pub enum CtxBuffer<'a> {
    ReadOnly(&'a [u8]),
    Mutable(&'a mut [u8]),
}

impl CtxBuffer<'_> {
    fn len(&self) -> usize {
        match self {
            CtxBuffer::ReadOnly(b) => b.len(),
            CtxBuffer::Mutable(b) => b.len(),
        }
    }
}

/// The memory a helper may address on the VM side.
pub struct VmMemory<'a> {
    stack: &'a mut [u8; STACK_SIZE],
    ctx: CtxBuffer<'a>,
}

impl VmMemory<'_> {
    fn range(addr: u64, len: u64, base: u64, size: usize) -> Option<std::ops::Range<usize>> {
        let end = addr.checked_add(len)?;
        if addr >= base && end <= base + size as u64 {
            let s = (addr - base) as usize;
            Some(s..s + len as usize)
        } else {
            None
        }
    }

    /// Bytes at `addr` in the stack or context window.
    pub fn slice(&mut self, addr: u64, len: u64) -> Result<&[u8], HelperFault> {
        if let Some(r) = Self::range(addr, len, STACK_BASE, STACK_SIZE) {
            return Ok(&self.stack[r]);
        }
        if let Some(r) = Self::range(addr, len, CTX_BASE, self.ctx.len()) {
            return Ok(match &self.ctx {
                CtxBuffer::ReadOnly(b) => &b[r],
                CtxBuffer::Mutable(b) => &b[r],
            });
        }
        Err(HelperFault::VmAddress { addr, len })
    }

    /// Writable bytes at `addr`; a read-only context buffer is not writable.
    pub fn slice_mut(&mut self, addr: u64, len: u64) -> Result<&mut [u8], HelperFault> {
        if let Some(r) = Self::range(addr, len, STACK_BASE, STACK_SIZE) {
            return Ok(&mut self.stack[r]);
        }
        if let Some(r) = Self::range(addr, len, CTX_BASE, self.ctx.len()) {
            if let CtxBuffer::Mutable(b) = &mut self.ctx {
                return Ok(&mut b[r]);
            }
        }
        Err(HelperFault::VmAddress { addr, len })
    }
}

/// What a VM instance is bound to: the user-side segment mapping and,
/// for the args/retval helpers, the calling thread's slot.
#[derive(Clone, Debug, Default)]
pub struct HelperEnv {
    pub segment: Option<SegmentView>,
    pub thread_id: Option<usize>,
    pub layout: ThreadSlotLayout,
    pub pss: crate::pss::PssConfig,
}

impl HelperEnv {
    pub fn with_segment(segment: SegmentView) -> Self {
        HelperEnv {
            segment: Some(segment),
            ..Default::default()
        }
    }
}

/// Arguments and environment handed to a helper implementation.
pub struct HelperCall<'a, 'm> {
    pub args: [u64; 5],
    pub mem: &'a mut VmMemory<'m>,
    pub env: &'a HelperEnv,
}

pub type HelperFn = Arc<dyn Fn(&mut HelperCall<'_, '_>) -> Result<u64, HelperFault> + Send + Sync>;

#[derive(Clone)]
pub struct HelperEntry {
    pub name: &'static str,
    pub arity: u8,
    pub func: HelperFn,
}

impl std::fmt::Debug for HelperEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HelperEntry")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .finish()
    }
}

/// Helper ID → implementation. ID 0 is reserved.
#[derive(Clone, Debug, Default)]
pub struct HelperTable {
    entries: BTreeMap<u32, HelperEntry>,
}

impl HelperTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(
        &mut self,
        id: u32,
        name: &'static str,
        arity: u8,
        func: F,
    ) -> Result<(), HelperTableError>
    where
        F: Fn(&mut HelperCall<'_, '_>) -> Result<u64, HelperFault> + Send + Sync + 'static,
    {
        if id == 0 {
            return Err(HelperTableError::ReservedId);
        }
        if self.entries.contains_key(&id) {
            return Err(HelperTableError::DuplicateHelper(id));
        }
        self.entries.insert(
            id,
            HelperEntry {
                name,
                arity,
                func: Arc::new(func),
            },
        );
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&HelperEntry> {
        self.entries.get(&id)
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.entries.keys().copied().collect()
    }
}

/// Initial register values and the context buffer for one execution.
///
/// The default entry convention puts the context word in `r1`, its length in
/// `r2`, and zero in `r3`–`r5`.
pub struct Context<'a> {
    pub args: [u64; 5],
    pub buffer: CtxBuffer<'a>,
}

impl Context<'static> {
    pub fn word(word: u64, len: u64) -> Self {
        Context::args([word, len, 0, 0, 0])
    }

    /// Explicit `r1`–`r5` values, no context buffer.
    pub fn args(args: [u64; 5]) -> Self {
        Context {
            args,
            buffer: CtxBuffer::ReadOnly(&[]),
        }
    }
}

impl<'a> Context<'a> {
    /// `r1` = address of `buffer` in the context window, `r2` = its length.
    pub fn buffer(buffer: &'a mut [u8]) -> Self {
        Context {
            args: [CTX_BASE, buffer.len() as u64, 0, 0, 0],
            buffer: CtxBuffer::Mutable(buffer),
        }
    }

    /// As [`buffer`](Self::buffer), but helpers may only read it.
    pub fn input(buffer: &'a [u8]) -> Self {
        Context {
            args: [CTX_BASE, buffer.len() as u64, 0, 0, 0],
            buffer: CtxBuffer::ReadOnly(buffer),
        }
    }

    /// Override `r3`.
    pub fn with_r3(mut self, value: u64) -> Self {
        self.args[2] = value;
        self
    }
}

/// A single-threaded interpreter instance.
pub struct VmInstance {
    helpers: HelperTable,
    env: HelperEnv,
    step_limit: u64,
}

impl VmInstance {
    pub fn new(helpers: HelperTable, env: HelperEnv) -> Self {
        VmInstance {
            helpers,
            env,
            step_limit: DEFAULT_STEP_LIMIT,
        }
    }

    /// The standard calling library bound to `env`.
    pub fn standard(env: HelperEnv) -> Self {
        Self::new(HelperTable::standard(), env)
    }

    pub fn with_step_limit(mut self, limit: u64) -> Self {
        self.step_limit = limit;
        self
    }

    pub fn helpers(&self) -> &HelperTable {
        &self.helpers
    }

    pub fn env(&self) -> &HelperEnv {
        &self.env
    }

    pub fn env_mut(&mut self) -> &mut HelperEnv {
        &mut self.env
    }

    pub fn execute(&self, program: &VerifiedProgram, ctx: Context<'_>) -> Result<u64, VmError> {
        if let Some(&id) = program
            .helper_ids_used()
            .iter()
            .find(|id| self.helpers.get(**id).is_none())
        {
            return Err(VmError::UnknownHelper(id));
        }
        let mut stack = [0u8; STACK_SIZE];
        let mut mem = VmMemory {
            stack: &mut stack,
            ctx: ctx.buffer,
        };
        let mut reg = [0u64; 11];
        reg[1..6].copy_from_slice(&ctx.args);
        reg[FRAME_POINTER as usize] = STACK_TOP;
        run(program.instructions(), &mut reg, &mut mem, &self.helpers, &self.env, self.step_limit)
    }
}

fn run(
    prog: &[Instruction],
    reg: &mut [u64; 11],
    mem: &mut VmMemory<'_>,
    helpers: &HelperTable,
    env: &HelperEnv,
    step_limit: u64,
) -> Result<u64, VmError> {
    let mut pc = 0usize;
    let mut steps = 0u64;
    loop {
        let insn = prog.get(pc).ok_or(VmError::PcOutOfRange(pc))?;
        steps += 1;
        if steps > step_limit {
            return Err(VmError::StepLimitExceeded(step_limit));
        }
        let dst = insn.dst as usize;
        let src = insn.src as usize;
        let imm = insn.imm;
        let mut next = pc + 1;
        match Kind::of(insn.opcode).ok_or(VmError::PcOutOfRange(pc))? {
            Kind::Alu { width, op, src: s } => {
                reg[dst] = match width {
                    Width::W64 => {
                        let rhs = match s {
                            Source::Imm => imm as i64 as u64,
                            Source::Reg => reg[src],
                        };
                        alu64(op, reg[dst], rhs)
                    }
                    Width::W32 => {
                        let rhs = match s {
                            Source::Imm => imm as u32,
                            Source::Reg => reg[src] as u32,
                        };
                        alu32(op, reg[dst] as u32, rhs) as u64
                    }
                };
            }
            Kind::Jump => next = jump(pc, insn.offset),
            Kind::CondJump { width, cond, src: s } => {
                let taken = match width {
                    Width::W64 => {
                        let rhs = match s {
                            Source::Imm => imm as i64 as u64,
                            Source::Reg => reg[src],
                        };
                        cmp64(cond, reg[dst], rhs)
                    }
                    Width::W32 => {
                        let rhs = match s {
                            Source::Imm => imm as u32,
                            Source::Reg => reg[src] as u32,
                        };
                        cmp32(cond, reg[dst] as u32, rhs)
                    }
                };
                if taken {
                    next = jump(pc, insn.offset);
                }
            }
            Kind::Call => {
                let id = imm as u32;
                let entry = helpers.get(id).ok_or(VmError::UnknownHelper(id))?;
                let mut call = HelperCall {
                    args: [reg[1], reg[2], reg[3], reg[4], reg[5]],
                    mem,
                    env,
                };
                reg[0] = (entry.func)(&mut call).map_err(|cause| VmError::HelperFault { id, cause })?;
                reg[1..6].fill(0);
            }
            Kind::Exit => return Ok(reg[0]),
            Kind::Load { size } => {
                let addr = reg[src].wrapping_add(insn.offset as i64 as u64);
                reg[dst] = load(mem, pc, addr, size)?;
            }
            Kind::StoreImm { size } => {
                let addr = reg[dst].wrapping_add(insn.offset as i64 as u64);
                store(mem, pc, addr, size, imm as i64 as u64)?;
            }
            Kind::StoreReg { size } => {
                let addr = reg[dst].wrapping_add(insn.offset as i64 as u64);
                store(mem, pc, addr, size, reg[src])?;
            }
            Kind::LoadImm64 => {
                let hi = prog.get(pc + 1).ok_or(VmError::PcOutOfRange(pc + 1))?;
                reg[dst] = (imm as u32 as u64) | ((hi.imm as u32 as u64) << 32);
                next = pc + 2;
            }
        }
        pc = next;
    }
}

fn jump(pc: usize, offset: i16) -> usize {
    (pc as i64 + 1 + offset as i64) as usize
}

fn alu64(op: AluOp, a: u64, b: u64) -> u64 {
    match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Sub => a.wrapping_sub(b),
        AluOp::Mul => a.wrapping_mul(b),
        AluOp::Div => a.checked_div(b).unwrap_or(0),
        AluOp::Mod => a.checked_rem(b).unwrap_or(a),
        AluOp::Or => a | b,
        AluOp::And => a & b,
        AluOp::Xor => a ^ b,
        AluOp::Lsh => a.wrapping_shl((b & 63) as u32),
        AluOp::Rsh => a.wrapping_shr((b & 63) as u32),
        AluOp::Arsh => ((a as i64) >> (b & 63)) as u64,
        AluOp::Neg => (a as i64).wrapping_neg() as u64,
        AluOp::Mov => b,
    }
}

fn alu32(op: AluOp, a: u32, b: u32) -> u32 {
    match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Sub => a.wrapping_sub(b),
        AluOp::Mul => a.wrapping_mul(b),
        AluOp::Div => a.checked_div(b).unwrap_or(0),
        AluOp::Mod => a.checked_rem(b).unwrap_or(a),
        AluOp::Or => a | b,
        AluOp::And => a & b,
        AluOp::Xor => a ^ b,
        AluOp::Lsh => a.wrapping_shl(b & 31),
        AluOp::Rsh => a.wrapping_shr(b & 31),
        AluOp::Arsh => ((a as i32) >> (b & 31)) as u32,
        AluOp::Neg => (a as i32).wrapping_neg() as u32,
        AluOp::Mov => b,
    }
}

fn cmp64(cond: JmpCond, a: u64, b: u64) -> bool {
    match cond {
        JmpCond::Eq => a == b,
        JmpCond::Ne => a != b,
        JmpCond::Gt => a > b,
        JmpCond::Ge => a >= b,
        JmpCond::Lt => a < b,
        JmpCond::Le => a <= b,
        JmpCond::Set => a & b != 0,
        JmpCond::Sgt => (a as i64) > (b as i64),
        JmpCond::Sge => (a as i64) >= (b as i64),
        JmpCond::Slt => (a as i64) < (b as i64),
        JmpCond::Sle => (a as i64) <= (b as i64),
    }
}

fn cmp32(cond: JmpCond, a: u32, b: u32) -> bool {
    match cond {
        JmpCond::Eq => a == b,
        JmpCond::Ne => a != b,
        JmpCond::Gt => a > b,
        JmpCond::Ge => a >= b,
        JmpCond::Lt => a < b,
        JmpCond::Le => a <= b,
        JmpCond::Set => a & b != 0,
        JmpCond::Sgt => (a as i32) > (b as i32),
        JmpCond::Sge => (a as i32) >= (b as i32),
        JmpCond::Slt => (a as i32) < (b as i32),
        JmpCond::Sle => (a as i32) <= (b as i32),
    }
}

// Direct loads and stores reach the stack only; the verifier proves this
// statically and these checks back it at runtime.
fn stack_range(pc: usize, addr: u64, size: MemSize) -> Result<usize, VmError> {
    let len = size.bytes();
    match addr.checked_add(len as u64) {
        Some(end) if addr >= STACK_BASE && end <= STACK_TOP => Ok((addr - STACK_BASE) as usize),
        _ => Err(VmError::MemoryFault { pc, addr, len }),
    }
}

fn load(mem: &VmMemory<'_>, pc: usize, addr: u64, size: MemSize) -> Result<u64, VmError> {
    let s = stack_range(pc, addr, size)?;
    let mut b = [0u8; 8];
    b[..size.bytes()].copy_from_slice(&mem.stack[s..s + size.bytes()]);
    Ok(u64::from_le_bytes(b))
}

fn store(mem: &mut VmMemory<'_>, pc: usize, addr: u64, size: MemSize, value: u64) -> Result<(), VmError> {
    let s = stack_range(pc, addr, size)?;
    let n = size.bytes();
    mem.stack[s..s + n].copy_from_slice(&value.to_le_bytes()[..n]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::*;
    use crate::verifier::verify;

    fn exec(vm: &VmInstance, insns: &[Instruction], ctx: Context<'_>) -> Result<u64, VmError> {
        let p = BpfProgram::from_instructions(insns.to_vec()).unwrap();
        let v = verify(&p, &vm.helpers().ids()).unwrap_or_else(|r| panic!("rejected:\n{r}"));
        vm.execute(&v, ctx)
    }

    fn bare() -> VmInstance {
        VmInstance::new(HelperTable::new(), HelperEnv::default())
    }

    #[test]
    fn add_immediates() {
        let r = exec(
            &bare(),
            &[
                Instruction::mov64_imm(0, 2),
                Instruction::alu_imm(ADD64_IMM, 0, 3),
                Instruction::exit(),
            ],
            Context::word(0, 0),
        );
        assert_eq!(r, Ok(5));
    }

    #[test]
    fn division_and_modulo_by_zero() {
        let div = [
            Instruction::mov64_imm(0, 10),
            Instruction::mov64_imm(1, 0),
            Instruction::alu_reg(DIV64_REG, 0, 1),
            Instruction::exit(),
        ];
        assert_eq!(exec(&bare(), &div, Context::word(0, 0)), Ok(0));
        let modulo = [
            Instruction::mov64_imm(0, 10),
            Instruction::mov64_imm(1, 0),
            Instruction::alu_reg(MOD64_REG, 0, 1),
            Instruction::exit(),
        ];
        assert_eq!(exec(&bare(), &modulo, Context::word(0, 0)), Ok(10));
    }

    #[test]
    fn alu32_zero_extends_and_shifts_mask() {
        assert_eq!(alu32(AluOp::Add, u32::MAX, 2), 1);
        assert_eq!(alu64(AluOp::Lsh, 1, 65), 2);
        assert_eq!(alu32(AluOp::Lsh, 1, 33), 2);
        assert_eq!(alu64(AluOp::Arsh, u64::MAX << 4, 2), u64::MAX << 2);
        assert_eq!(alu32(AluOp::Arsh, 0x8000_0000, 31), u32::MAX);
        let r = exec(
            &bare(),
            &[
                Instruction::mov64_imm(0, -1),
                Instruction::alu_imm(ADD32_IMM, 0, 0),
                Instruction::exit(),
            ],
            Context::word(0, 0),
        );
        assert_eq!(r, Ok(0xffff_ffff));
    }

    #[test]
    fn entry_registers() {
        let r = exec(
            &bare(),
            &[
                Instruction::mov64_reg(0, 1),
                Instruction::alu_reg(ADD64_REG, 0, 2),
                Instruction::alu_reg(ADD64_REG, 0, 3),
                Instruction::exit(),
            ],
            Context::word(40, 2),
        );
        assert_eq!(r, Ok(42));
        let fp = exec(
            &bare(),
            &[Instruction::mov64_reg(0, 10), Instruction::exit()],
            Context::word(0, 0),
        );
        assert_eq!(fp, Ok(STACK_TOP));
    }

    #[test]
    fn stack_roundtrip() {
        let r = exec(
            &bare(),
            &[
                Instruction::ld_dw_imm(1, 0x1122_3344_5566_7788)[0],
                Instruction::ld_dw_imm(1, 0x1122_3344_5566_7788)[1],
                Instruction::new(STX_DW_REG, 10, 1, -8, 0),
                Instruction::new(LDX_W_REG, 0, 10, -4, 0),
                Instruction::exit(),
            ],
            Context::word(0, 0),
        );
        assert_eq!(r, Ok(0x1122_3344));
    }

    #[test]
    fn helper_table_registration() {
        let mut t = HelperTable::new();
        t.register(1, "one", 0, |_| Ok(1)).unwrap();
        assert_eq!(
            t.register(1, "again", 0, |_| Ok(1)).err(),
            Some(HelperTableError::DuplicateHelper(1))
        );
        assert_eq!(
            t.register(0, "zero", 0, |_| Ok(0)).err(),
            Some(HelperTableError::ReservedId)
        );
        let vm = VmInstance::new(t, HelperEnv::default());
        assert_eq!(
            exec(&vm, &[Instruction::call(1), Instruction::exit()], Context::word(0, 0)),
            Ok(1)
        );
    }

    #[test]
    fn call_clobbers_argument_registers() {
        let mut t = HelperTable::new();
        t.register(7, "sum", 2, |c| Ok(c.args[0] + c.args[1])).unwrap();
        let vm = VmInstance::new(t, HelperEnv::default());
        let r = exec(
            &vm,
            &[
                Instruction::mov64_imm(1, 4),
                Instruction::mov64_imm(2, 5),
                Instruction::call(7),
                Instruction::exit(),
            ],
            Context::word(0, 0),
        );
        assert_eq!(r, Ok(9));
    }

    #[test]
    fn helper_mismatch_is_unknown_helper() {
        let mut t = HelperTable::new();
        t.register(3, "x", 0, |_| Ok(0)).unwrap();
        let p = BpfProgram::from_instructions(vec![Instruction::call(3), Instruction::exit()]).unwrap();
        let v = verify(&p, &t.ids()).unwrap();
        assert_eq!(bare().execute(&v, Context::word(0, 0)), Err(VmError::UnknownHelper(3)));
    }

    #[test]
    fn step_limit_guard() {
        let vm = bare().with_step_limit(2);
        let r = exec(
            &vm,
            &[
                Instruction::mov64_imm(0, 1),
                Instruction::mov64_imm(0, 2),
                Instruction::exit(),
            ],
            Context::word(0, 0),
        );
        assert_eq!(r, Err(VmError::StepLimitExceeded(2)));
    }
}
