// SPDX-License-Identifier: Apache-2.0

//! The standard calling library: the only route from a program to the
//! shared segment. Segment offsets are relative to the segment start and
//! checked against its size on every call.

use thiserror::Error;

use super::{HelperCall, HelperTable};
use crate::pss::PerceptronModel;
use crate::ring::{RingError, SpscRing};
use crate::shmem::{SegmentView, ShmError};

pub const HELPER_SHM_READ_U64: u32 = 1;
pub const HELPER_SHM_WRITE_U64: u32 = 2;
pub const HELPER_SHM_READ_VEC: u32 = 3;
pub const HELPER_SHM_WRITE_VEC: u32 = 4;
pub const HELPER_RING_PUSH: u32 = 5;
pub const HELPER_PSS_PREDICT: u32 = 6;
pub const HELPER_PSS_UPDATE: u32 = 7;
pub const HELPER_ARGS_WRITE: u32 = 8;
pub const HELPER_RETVAL_READ: u32 = 9;

/// `ring_push` result when the ring has no room.
pub const RING_PUSH_FULL: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HelperFault {
    #[error("no shared segment is attached")]
    NoSegment,
    #[error("segment access [{offset:#x}, +{len}) outside {size}-byte segment")]
    SegmentBounds { offset: u64, len: u64, size: usize },
    #[error("VM address {addr:#x} (+{len}) is outside the stack and context windows")]
    VmAddress { addr: u64, len: u64 },
    #[error("record of {len} bytes exceeds ring limit {max}")]
    RecordTooLarge { len: u64, max: u64 },
    #[error("empty ring record")]
    EmptyRecord,
    #[error("no thread slot is bound")]
    NoThread,
    #[error("thread {thread} outside pool of {max_threads}")]
    InvalidThread { thread: usize, max_threads: usize },
    #[error("length {len} exceeds slot capacity {max}")]
    LengthExceedsSlot { len: u64, max: u64 },
    #[error("{0}")]
    Other(String),
}

impl From<ShmError> for HelperFault {
    fn from(e: ShmError) -> Self {
        match e {
            ShmError::OutOfBounds { offset, len, size } => {
                HelperFault::SegmentBounds { offset, len, size }
            }
            ShmError::InvalidThread { thread, max_threads } => {
                HelperFault::InvalidThread { thread, max_threads }
            }
            other => HelperFault::Other(other.to_string()),
        }
    }
}

fn segment<'a>(call: &HelperCall<'a, '_>) -> Result<&'a SegmentView, HelperFault> {
    call.env.segment.as_ref().ok_or(HelperFault::NoSegment)
}

fn thread(call: &HelperCall<'_, '_>) -> Result<usize, HelperFault> {
    call.env.thread_id.ok_or(HelperFault::NoThread)
}

fn shm_read_u64(c: &mut HelperCall<'_, '_>) -> Result<u64, HelperFault> {
    Ok(segment(c)?.read_u64(c.args[0])?)
}

fn shm_write_u64(c: &mut HelperCall<'_, '_>) -> Result<u64, HelperFault> {
    segment(c)?.write_u64(c.args[0], c.args[1])?;
    Ok(0)
}

fn shm_read_vec(c: &mut HelperCall<'_, '_>) -> Result<u64, HelperFault> {
    let [shm_off, addr, len, ..] = c.args;
    let seg = segment(c)?;
    seg.check(shm_off, len)?;
    let dst = c.mem.slice_mut(addr, len)?;
    seg.read(shm_off, dst)?;
    Ok(len)
}

fn shm_write_vec(c: &mut HelperCall<'_, '_>) -> Result<u64, HelperFault> {
    let [addr, shm_off, len, ..] = c.args;
    let seg = segment(c)?;
    seg.check(shm_off, len)?;
    let src = c.mem.slice(addr, len)?;
    seg.write(shm_off, src)?;
    Ok(len)
}

fn ring_push(c: &mut HelperCall<'_, '_>) -> Result<u64, HelperFault> {
    let [addr, len, ..] = c.args;
    let ring = SpscRing::in_segment(segment(c)?).map_err(|e| HelperFault::Other(e.to_string()))?;
    if len == 0 {
        return Err(HelperFault::EmptyRecord);
    }
    let max = ring.max_record() as u64;
    if len > max {
        return Err(HelperFault::RecordTooLarge { len, max });
    }
    let payload = c.mem.slice(addr, len)?;
    match ring.push(payload) {
        Ok(()) => Ok(0),
        Err(RingError::Full) => Ok(RING_PUSH_FULL),
        Err(e) => Err(HelperFault::Other(e.to_string())),
    }
}

fn pss_predict(c: &mut HelperCall<'_, '_>) -> Result<u64, HelperFault> {
    let model = PerceptronModel::in_segment(segment(c)?, c.env.pss)?;
    Ok(model.predict(&[c.args[0], c.args[1], c.args[2]]).decision as u64)
}

fn pss_update(c: &mut HelperCall<'_, '_>) -> Result<u64, HelperFault> {
    let mut model = PerceptronModel::in_segment(segment(c)?, c.env.pss)?;
    let p = model.update(&[c.args[0], c.args[1], c.args[2]], c.args[3] != 0);
    Ok(p.decision as u64)
}

/// Writes `[len: u64][bytes]` into the bound thread's args slot.
fn args_write(c: &mut HelperCall<'_, '_>) -> Result<u64, HelperFault> {
    let [addr, len, ..] = c.args;
    let seg = segment(c)?;
    let layout = c.env.layout;
    let off = layout.args_offset(thread(c)?)? as u64;
    let max = (layout.args_size - 8) as u64;
    if len > max {
        return Err(HelperFault::LengthExceedsSlot { len, max });
    }
    let src = c.mem.slice(addr, len)?;
    seg.write(off + 8, src)?;
    seg.write_u64(off, len)?;
    Ok(len)
}

/// Copies the first `len` bytes of the bound thread's return slot out.
fn retval_read(c: &mut HelperCall<'_, '_>) -> Result<u64, HelperFault> {
    let [addr, len, ..] = c.args;
    let seg = segment(c)?;
    let layout = c.env.layout;
    let off = layout.ret_offset(thread(c)?)? as u64;
    let max = layout.ret_size as u64;
    if len > max {
        return Err(HelperFault::LengthExceedsSlot { len, max });
    }
    let dst = c.mem.slice_mut(addr, len)?;
    seg.read(off, dst)?;
    Ok(len)
}

type HelperImpl = fn(&mut HelperCall<'_, '_>) -> Result<u64, HelperFault>;

impl HelperTable {
    /// Table holding helpers 1–9.
    pub fn standard() -> Self {
        let mut t = HelperTable::new();
        let entries: [(u32, &'static str, u8, HelperImpl); 9] = [
            (HELPER_SHM_READ_U64, "shm_read_u64", 1, shm_read_u64),
            (HELPER_SHM_WRITE_U64, "shm_write_u64", 2, shm_write_u64),
            (HELPER_SHM_READ_VEC, "shm_read_vec", 3, shm_read_vec),
            (HELPER_SHM_WRITE_VEC, "shm_write_vec", 3, shm_write_vec),
            (HELPER_RING_PUSH, "ring_push", 2, ring_push),
            (HELPER_PSS_PREDICT, "pss_predict", 3, pss_predict),
            (HELPER_PSS_UPDATE, "pss_update", 4, pss_update),
            (HELPER_ARGS_WRITE, "args_write", 2, args_write),
            (HELPER_RETVAL_READ, "retval_read", 2, retval_read),
        ];
        for (id, name, arity, f) in entries {
            t.register(id, name, arity, f).expect("standard ids are unique");
        }
        t
    }
}
