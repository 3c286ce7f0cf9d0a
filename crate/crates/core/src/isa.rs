// SPDX-License-Identifier: Apache-2.0

//! Instruction set: the 64-bit eBPF slot layout, opcode tables, and
//! program decode/encode.
//!
//! Each slot is 8 bytes, little-endian:
//!
//! ```text
//! +--------+--------+--------+----------------+
//! | opcode | src:dst| offset |   immediate    |
//! | 8 bit  | 4:4 bit| 16 bit |     32 bit     |
//! +--------+--------+--------+----------------+
//! ```
//!
//! The 16-byte wide-immediate load (`LD_DW_IMM`) spans two slots; the second
//! slot carries opcode `0x00` and the upper 32 bits of the constant in its
//! immediate field.

use thiserror::Error;

/// Size of one instruction slot in bytes.
pub const INSN_SIZE: usize = 8;
/// Maximum number of instruction slots accepted by the verifier.
pub const MAX_PROGRAM_LEN: usize = 4096;
/// Highest register index (`r10`, the frame pointer).
pub const MAX_REGISTER: u8 = 10;
/// Frame pointer register.
pub const FRAME_POINTER: u8 = 10;

// Instruction classes.
pub const BPF_LD: u8 = 0x00;
pub const BPF_LDX: u8 = 0x01;
pub const BPF_ST: u8 = 0x02;
pub const BPF_STX: u8 = 0x03;
pub const BPF_ALU: u8 = 0x04;
pub const BPF_JMP: u8 = 0x05;
pub const BPF_JMP32: u8 = 0x06;
pub const BPF_ALU64: u8 = 0x07;

// Operand source.
pub const BPF_K: u8 = 0x00;
pub const BPF_X: u8 = 0x08;

// Memory access sizes and modes.
pub const BPF_W: u8 = 0x00;
pub const BPF_H: u8 = 0x08;
pub const BPF_B: u8 = 0x10;
pub const BPF_DW: u8 = 0x18;
pub const BPF_IMM: u8 = 0x00;
pub const BPF_MEM: u8 = 0x60;

// Wide immediate load.
pub const LD_DW_IMM: u8 = BPF_LD | BPF_IMM | BPF_DW;

// Loads and stores.
pub const LDX_W_REG: u8 = BPF_LDX | BPF_MEM | BPF_W;
pub const LDX_H_REG: u8 = BPF_LDX | BPF_MEM | BPF_H;
pub const LDX_B_REG: u8 = BPF_LDX | BPF_MEM | BPF_B;
pub const LDX_DW_REG: u8 = BPF_LDX | BPF_MEM | BPF_DW;
pub const ST_W_IMM: u8 = BPF_ST | BPF_MEM | BPF_W;
pub const ST_H_IMM: u8 = BPF_ST | BPF_MEM | BPF_H;
pub const ST_B_IMM: u8 = BPF_ST | BPF_MEM | BPF_B;
pub const ST_DW_IMM: u8 = BPF_ST | BPF_MEM | BPF_DW;
pub const STX_W_REG: u8 = BPF_STX | BPF_MEM | BPF_W;
pub const STX_H_REG: u8 = BPF_STX | BPF_MEM | BPF_H;
pub const STX_B_REG: u8 = BPF_STX | BPF_MEM | BPF_B;
pub const STX_DW_REG: u8 = BPF_STX | BPF_MEM | BPF_DW;

// ALU operation codes (high nibble).
pub const BPF_ADD: u8 = 0x00;
pub const BPF_SUB: u8 = 0x10;
pub const BPF_MUL: u8 = 0x20;
pub const BPF_DIV: u8 = 0x30;
pub const BPF_OR: u8 = 0x40;
pub const BPF_AND: u8 = 0x50;
pub const BPF_LSH: u8 = 0x60;
pub const BPF_RSH: u8 = 0x70;
pub const BPF_NEG: u8 = 0x80;
pub const BPF_MOD: u8 = 0x90;
pub const BPF_XOR: u8 = 0xa0;
pub const BPF_MOV: u8 = 0xb0;
pub const BPF_ARSH: u8 = 0xc0;

// Jump operation codes (high nibble).
pub const BPF_JA: u8 = 0x00;
pub const BPF_JEQ: u8 = 0x10;
pub const BPF_JGT: u8 = 0x20;
pub const BPF_JGE: u8 = 0x30;
pub const BPF_JSET: u8 = 0x40;
pub const BPF_JNE: u8 = 0x50;
pub const BPF_JSGT: u8 = 0x60;
pub const BPF_JSGE: u8 = 0x70;
pub const BPF_CALL: u8 = 0x80;
pub const BPF_EXIT: u8 = 0x90;
pub const BPF_JLT: u8 = 0xa0;
pub const BPF_JLE: u8 = 0xb0;
pub const BPF_JSLT: u8 = 0xc0;
pub const BPF_JSLE: u8 = 0xd0;

// Frequently used full opcodes.
pub const ADD64_IMM: u8 = BPF_ALU64 | BPF_K | BPF_ADD;
pub const ADD64_REG: u8 = BPF_ALU64 | BPF_X | BPF_ADD;
pub const SUB64_IMM: u8 = BPF_ALU64 | BPF_K | BPF_SUB;
pub const SUB64_REG: u8 = BPF_ALU64 | BPF_X | BPF_SUB;
pub const MUL64_IMM: u8 = BPF_ALU64 | BPF_K | BPF_MUL;
pub const MUL64_REG: u8 = BPF_ALU64 | BPF_X | BPF_MUL;
pub const DIV64_IMM: u8 = BPF_ALU64 | BPF_K | BPF_DIV;
pub const DIV64_REG: u8 = BPF_ALU64 | BPF_X | BPF_DIV;
pub const MOD64_IMM: u8 = BPF_ALU64 | BPF_K | BPF_MOD;
pub const MOD64_REG: u8 = BPF_ALU64 | BPF_X | BPF_MOD;
pub const MOV64_IMM: u8 = BPF_ALU64 | BPF_K | BPF_MOV;
pub const MOV64_REG: u8 = BPF_ALU64 | BPF_X | BPF_MOV;
pub const MOV32_IMM: u8 = BPF_ALU | BPF_K | BPF_MOV;
pub const MOV32_REG: u8 = BPF_ALU | BPF_X | BPF_MOV;
pub const ADD32_IMM: u8 = BPF_ALU | BPF_K | BPF_ADD;
pub const ADD32_REG: u8 = BPF_ALU | BPF_X | BPF_ADD;
pub const NEG64: u8 = BPF_ALU64 | BPF_NEG;
pub const NEG32: u8 = BPF_ALU | BPF_NEG;
pub const JA: u8 = BPF_JMP | BPF_JA;
pub const JEQ_IMM: u8 = BPF_JMP | BPF_K | BPF_JEQ;
pub const JEQ_REG: u8 = BPF_JMP | BPF_X | BPF_JEQ;
pub const JNE_IMM: u8 = BPF_JMP | BPF_K | BPF_JNE;
pub const JGT_IMM: u8 = BPF_JMP | BPF_K | BPF_JGT;
pub const JSGT_IMM: u8 = BPF_JMP | BPF_K | BPF_JSGT;
pub const CALL: u8 = BPF_JMP | BPF_CALL;
pub const EXIT: u8 = BPF_JMP | BPF_EXIT;

/// Width of an ALU or conditional-jump operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Width {
    W32,
    W64,
}

/// Second operand of an ALU or jump instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Imm,
    Reg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Div,
    Or,
    And,
    Lsh,
    Rsh,
    Neg,
    Mod,
    Xor,
    Mov,
    Arsh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JmpCond {
    Eq,
    Gt,
    Ge,
    Set,
    Ne,
    Sgt,
    Sge,
    Lt,
    Le,
    Slt,
    Sle,
}

/// Memory access width in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemSize {
    B,
    H,
    W,
    DW,
}

impl MemSize {
    pub fn bytes(self) -> usize {
        match self {
            MemSize::B => 1,
            MemSize::H => 2,
            MemSize::W => 4,
            MemSize::DW => 8,
        }
    }

    fn from_bits(bits: u8) -> MemSize {
        match bits & 0x18 {
            BPF_B => MemSize::B,
            BPF_H => MemSize::H,
            BPF_W => MemSize::W,
            _ => MemSize::DW,
        }
    }
}

/// Semantic classification of a supported opcode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Alu { width: Width, op: AluOp, src: Source },
    Jump,
    CondJump { width: Width, cond: JmpCond, src: Source },
    Call,
    Exit,
    /// `dst = *(size *)(src + off)`
    Load { size: MemSize },
    /// `*(size *)(dst + off) = imm`
    StoreImm { size: MemSize },
    /// `*(size *)(dst + off) = src`
    StoreReg { size: MemSize },
    /// First slot of the 16-byte wide-immediate load.
    LoadImm64,
}

impl Kind {
    /// Classify `opcode`; `None` for anything outside the supported set.
    pub fn of(opcode: u8) -> Option<Kind> {
        let class = opcode & 0x07;
        let src = if opcode & BPF_X != 0 { Source::Reg } else { Source::Imm };
        match class {
            BPF_ALU | BPF_ALU64 => {
                let width = if class == BPF_ALU64 { Width::W64 } else { Width::W32 };
                let op = match opcode & 0xf0 {
                    BPF_ADD => AluOp::Add,
                    BPF_SUB => AluOp::Sub,
                    BPF_MUL => AluOp::Mul,
                    BPF_DIV => AluOp::Div,
                    BPF_OR => AluOp::Or,
                    BPF_AND => AluOp::And,
                    BPF_LSH => AluOp::Lsh,
                    BPF_RSH => AluOp::Rsh,
                    BPF_NEG if src == Source::Imm => AluOp::Neg,
                    BPF_MOD => AluOp::Mod,
                    BPF_XOR => AluOp::Xor,
                    BPF_MOV => AluOp::Mov,
                    BPF_ARSH => AluOp::Arsh,
                    _ => return None,
                };
                Some(Kind::Alu { width, op, src })
            }
            BPF_JMP | BPF_JMP32 => {
                let width = if class == BPF_JMP { Width::W64 } else { Width::W32 };
                let code = opcode & 0xf0;
                match (class, code) {
                    (BPF_JMP, BPF_JA) if opcode == JA => return Some(Kind::Jump),
                    (BPF_JMP, BPF_CALL) if opcode == CALL => return Some(Kind::Call),
                    (BPF_JMP, BPF_EXIT) if opcode == EXIT => return Some(Kind::Exit),
                    _ => {}
                }
                let cond = match code {
                    BPF_JEQ => JmpCond::Eq,
                    BPF_JGT => JmpCond::Gt,
                    BPF_JGE => JmpCond::Ge,
                    BPF_JSET => JmpCond::Set,
                    BPF_JNE => JmpCond::Ne,
                    BPF_JSGT => JmpCond::Sgt,
                    BPF_JSGE => JmpCond::Sge,
                    BPF_JLT => JmpCond::Lt,
                    BPF_JLE => JmpCond::Le,
                    BPF_JSLT => JmpCond::Slt,
                    BPF_JSLE => JmpCond::Sle,
                    _ => return None,
                };
                Some(Kind::CondJump { width, cond, src })
            }
            BPF_LD if opcode == LD_DW_IMM => Some(Kind::LoadImm64),
            BPF_LDX if opcode & 0xe0 == BPF_MEM => Some(Kind::Load {
                size: MemSize::from_bits(opcode),
            }),
            BPF_ST if opcode & 0xe0 == BPF_MEM => Some(Kind::StoreImm {
                size: MemSize::from_bits(opcode),
            }),
            BPF_STX if opcode & 0xe0 == BPF_MEM => Some(Kind::StoreReg {
                size: MemSize::from_bits(opcode),
            }),
            _ => None,
        }
    }
}

/// One decoded instruction slot.
///
/// The continuation slot of a wide-immediate load is kept as its own entry
/// (opcode `0x00`), so slot indices and jump displacements line up with the
/// byte stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub opcode: u8,
    pub dst: u8,
    pub src: u8,
    pub offset: i16,
    pub imm: i32,
}

impl Instruction {
    pub const fn new(opcode: u8, dst: u8, src: u8, offset: i16, imm: i32) -> Self {
        Instruction {
            opcode,
            dst,
            src,
            offset,
            imm,
        }
    }

    pub const fn alu_imm(opcode: u8, dst: u8, imm: i32) -> Self {
        Self::new(opcode, dst, 0, 0, imm)
    }

    pub const fn alu_reg(opcode: u8, dst: u8, src: u8) -> Self {
        Self::new(opcode, dst, src, 0, 0)
    }

    pub const fn mov64_imm(dst: u8, imm: i32) -> Self {
        Self::alu_imm(MOV64_IMM, dst, imm)
    }

    pub const fn mov64_reg(dst: u8, src: u8) -> Self {
        Self::alu_reg(MOV64_REG, dst, src)
    }

    pub const fn ja(offset: i16) -> Self {
        Self::new(JA, 0, 0, offset, 0)
    }

    pub const fn call(helper_id: u32) -> Self {
        Self::new(CALL, 0, 0, 0, helper_id as i32)
    }

    pub const fn exit() -> Self {
        Self::new(EXIT, 0, 0, 0, 0)
    }

    /// Both slots of `dst = imm64`.
    pub const fn ld_dw_imm(dst: u8, imm: u64) -> [Self; 2] {
        [
            Self::new(LD_DW_IMM, dst, 0, 0, imm as u32 as i32),
            Self::new(0, 0, 0, 0, (imm >> 32) as u32 as i32),
        ]
    }

    pub fn kind(&self) -> Option<Kind> {
        Kind::of(self.opcode)
    }

    pub fn to_bytes(&self) -> [u8; INSN_SIZE] {
        let off = self.offset.to_le_bytes();
        let imm = self.imm.to_le_bytes();
        [
            self.opcode,
            (self.src << 4) | (self.dst & 0x0f),
            off[0],
            off[1],
            imm[0],
            imm[1],
            imm[2],
            imm[3],
        ]
    }

    pub fn from_bytes(b: &[u8; INSN_SIZE]) -> Self {
        Instruction {
            opcode: b[0],
            dst: b[1] & 0x0f,
            src: b[1] >> 4,
            offset: i16::from_le_bytes([b[2], b[3]]),
            imm: i32::from_le_bytes([b[4], b[5], b[6], b[7]]),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsaError {
    #[error("program length {0} is not a nonzero multiple of 8")]
    InvalidLength(usize),
    #[error("invalid opcode {code:#04x} at slot {pos}")]
    InvalidOpcode { pos: usize, code: u8 },
    #[error("invalid register index at slot {0}")]
    InvalidRegister(usize),
    #[error("wide-immediate load at final slot {0}")]
    TruncatedWideLoad(usize),
    #[error("malformed wide-immediate continuation at slot {0}")]
    MalformedWideLoad(usize),
    #[error("unsupported instruction {code:#04x} at slot {pos}")]
    UnsupportedInstruction { pos: usize, code: u8 },
    #[error("empty program")]
    EmptyProgram,
}

/// A structurally valid instruction stream together with its byte encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpfProgram {
    instructions: Vec<Instruction>,
    source_bytes: Vec<u8>,
}

impl BpfProgram {
    /// Build a program from instruction slots, validating and encoding them.
    pub fn from_instructions(instructions: Vec<Instruction>) -> Result<Self, IsaError> {
        let source_bytes = encode_program(&instructions)?;
        Ok(BpfProgram {
            instructions,
            source_bytes,
        })
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn source_bytes(&self) -> &[u8] {
        &self.source_bytes
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }
}

/// Decode a raw little-endian instruction stream.
///
/// Only structural properties are checked here: the opcode set, register
/// indices and wide-load pairing. The slot-count limit is a verifier
/// concern, so overlong streams still decode.
pub fn decode_program(bytes: &[u8]) -> Result<BpfProgram, IsaError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(INSN_SIZE) {
        return Err(IsaError::InvalidLength(bytes.len()));
    }
    let instructions: Vec<Instruction> = bytes
        .chunks_exact(INSN_SIZE)
        .map(|c| Instruction::from_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    validate_slots(&instructions, |pos, code| IsaError::InvalidOpcode { pos, code })?;
    Ok(BpfProgram {
        instructions,
        source_bytes: bytes.to_vec(),
    })
}

/// Encode instruction slots into the 8-bytes-per-slot wire form.
pub fn encode_program(instructions: &[Instruction]) -> Result<Vec<u8>, IsaError> {
    if instructions.is_empty() {
        return Err(IsaError::EmptyProgram);
    }
    validate_slots(instructions, |pos, code| IsaError::UnsupportedInstruction {
        pos,
        code,
    })?;
    Ok(instructions.iter().flat_map(|i| i.to_bytes()).collect())
}

fn validate_slots(
    instructions: &[Instruction],
    bad_opcode: impl Fn(usize, u8) -> IsaError,
) -> Result<(), IsaError> {
    let mut pos = 0;
    while pos < instructions.len() {
        let insn = &instructions[pos];
        let kind = Kind::of(insn.opcode).ok_or_else(|| bad_opcode(pos, insn.opcode))?;
        if insn.dst > MAX_REGISTER || insn.src > MAX_REGISTER {
            return Err(IsaError::InvalidRegister(pos));
        }
        if kind == Kind::LoadImm64 {
            let next = instructions
                .get(pos + 1)
                .ok_or(IsaError::TruncatedWideLoad(pos))?;
            if next.opcode != 0 || next.dst != 0 || next.src != 0 || next.offset != 0 {
                return Err(IsaError::MalformedWideLoad(pos + 1));
            }
            pos += 2;
        } else {
            pos += 1;
        }
    }
    Ok(())
}
