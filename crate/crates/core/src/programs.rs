// SPDX-License-Identifier: Apache-2.0

//! Built-in programs used by the accelerated paths. Each is an ordinary
//! bytecode program: it is signed, loaded and verified like any other.

use crate::isa::{BpfProgram, Instruction, JNE_IMM, LDX_DW_REG, STX_DW_REG};
use crate::vm::{
    HELPER_ARGS_WRITE, HELPER_PSS_PREDICT, HELPER_PSS_UPDATE, HELPER_RETVAL_READ, HELPER_RING_PUSH,
};

/// `r3` selector for [`statfs`].
pub const STATFS_WRITE_ARGS: u64 = 0;
pub const STATFS_READ_RETVAL: u64 = 1;

/// With `r3 == 0`, copies the context buffer into the thread's args slot;
/// otherwise copies the return slot into the context buffer.
pub fn statfs() -> BpfProgram {
    BpfProgram::from_instructions(vec![
        Instruction::new(JNE_IMM, 3, 0, 2, 0),
        Instruction::call(HELPER_ARGS_WRITE),
        Instruction::exit(),
        Instruction::call(HELPER_RETVAL_READ),
        Instruction::exit(),
    ])
    .expect("static program")
}

/// Pushes the context buffer onto the segment ring; returns 0 or 1 (full).
pub fn ring_push() -> BpfProgram {
    BpfProgram::from_instructions(vec![Instruction::call(HELPER_RING_PUSH), Instruction::exit()])
        .expect("static program")
}

/// `r1..r3` = features, `r4` = outcome. Predicts, trains in place, and
/// returns the prediction made before training.
pub fn pss_predict_update() -> BpfProgram {
    let mut v = Vec::new();
    for r in 1..=4 {
        v.push(Instruction::mov64_reg(r + 5, r));
    }
    v.push(Instruction::call(HELPER_PSS_PREDICT));
    v.push(Instruction::new(STX_DW_REG, 10, 0, -8, 0));
    for r in 1..=4 {
        v.push(Instruction::mov64_reg(r, r + 5));
    }
    v.push(Instruction::call(HELPER_PSS_UPDATE));
    v.push(Instruction::new(LDX_DW_REG, 0, 10, -8, 0));
    v.push(Instruction::exit());
    BpfProgram::from_instructions(v).expect("static program")
}
