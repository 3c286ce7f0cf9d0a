// SPDX-License-Identifier: Apache-2.0

//! Single-producer single-consumer ring of variable-length records.
//!
//! The ring lives in the segment's ring region, so producer and consumer may
//! be different processes. Header layout, little-endian:
//!
//! ```text
//! [0, 8)      tail: producer cursor (monotonic byte count)
//! [64, 72)    head: consumer cursor (monotonic byte count)
//! [128, ...)  data area, `capacity` bytes
//! ```
//!
//! Each record is an 8-byte header (`u32` length, `u32` reserved) followed by
//! the payload padded to 8 bytes. Records never wrap; when a record does not
//! fit before the end of the data area the producer writes a skip marker
//! (length with the high bit set) and starts again at offset zero.
//!
//! Cursors are never wrapped. The producer publishes `tail` with release
//! ordering after the record bytes are written; the consumer publishes
//! `head` with release ordering after it has finished reading.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::shmem::{SegmentView, ShmError, RING_REGION_OFFSET, RING_REGION_SIZE};

pub const RING_TAIL_OFFSET: usize = 0;
pub const RING_HEAD_OFFSET: usize = 64;
pub const RING_DATA_OFFSET: usize = 128;
/// Largest power of two that fits the ring region after the header.
pub const RING_CAPACITY: usize = 128 << 10;
pub const RECORD_HEADER: usize = 8;
pub const SKIP_FLAG: u32 = 0x8000_0000;

#[derive(Debug, Error)]
pub enum RingError {
    #[error("ring full")]
    Full,
    #[error("record of {len} bytes exceeds limit of {max}")]
    RecordTooLarge { len: usize, max: usize },
    #[error("empty record")]
    EmptyRecord,
    #[error("capacity {0} is not a power of two")]
    BadCapacity(usize),
    #[error("ring region: {0}")]
    Region(#[from] ShmError),
    #[error("corrupt record header {header:#x} at cursor {cursor}")]
    Corrupt { header: u32, cursor: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingRecord {
    pub payload: Vec<u8>,
}

impl RingRecord {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

enum Backing {
    Segment(#[allow(dead_code)] SegmentView),
    Heap(#[allow(dead_code)] Box<[u64]>),
}

/// Handle on a ring living in shared or heap memory.
///
/// Any number of handles may exist, but at any time at most one of them may
/// act as producer (`push`) and at most one as consumer (`drain_*`).
pub struct SpscRing {
    base: *mut u8,
    capacity: usize,
    _backing: Backing,
}

// SAFETY: all shared state is accessed through atomics or raw copies ordered
// by them; the backing keeps the memory alive.
unsafe impl Send for SpscRing {}
unsafe impl Sync for SpscRing {}

fn padded(len: usize) -> usize {
    (len + 7) & !7
}

impl SpscRing {
    /// The ring in a segment's ring region.
    pub fn in_segment(view: &SegmentView) -> Result<Self, RingError> {
        let base = view.ptr(RING_REGION_OFFSET as u64, RING_REGION_SIZE as u64)?;
        Ok(SpscRing {
            base,
            capacity: RING_CAPACITY,
            _backing: Backing::Segment(view.clone()),
        })
    }

    /// A process-private ring, mostly for tests and single-process use.
    pub fn with_capacity(capacity: usize) -> Result<Self, RingError> {
        if !capacity.is_power_of_two() || capacity < 64 {
            return Err(RingError::BadCapacity(capacity));
        }
        let mut words = vec![0u64; (RING_DATA_OFFSET + capacity) / 8].into_boxed_slice();
        let base = words.as_mut_ptr().cast::<u8>();
        Ok(SpscRing {
            base,
            capacity,
            _backing: Backing::Heap(words),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Largest payload accepted by [`push`](Self::push).
    pub fn max_record(&self) -> usize {
        self.capacity - 16
    }

    fn tail_atomic(&self) -> &AtomicU64 {
        // SAFETY: base is 8-aligned and the header is inside the region.
        unsafe { &*(self.base.add(RING_TAIL_OFFSET) as *const AtomicU64) }
    }

    fn head_atomic(&self) -> &AtomicU64 {
        // SAFETY: as above.
        unsafe { &*(self.base.add(RING_HEAD_OFFSET) as *const AtomicU64) }
    }

    fn data(&self, pos: usize) -> *mut u8 {
        debug_assert!(pos < self.capacity);
        // SAFETY: pos < capacity.
        unsafe { self.base.add(RING_DATA_OFFSET + pos) }
    }

    pub fn tail(&self) -> u64 {
        self.tail_atomic().load(Ordering::Acquire)
    }

    pub fn head(&self) -> u64 {
        self.head_atomic().load(Ordering::Acquire)
    }

    /// Bytes between head and tail, as observed now.
    pub fn occupancy(&self) -> u64 {
        let head = self.head();
        self.tail().wrapping_sub(head)
    }

    /// Reset both cursors. Only valid while neither side is active.
    pub fn reset(&self) {
        self.tail_atomic().store(0, Ordering::Release);
        self.head_atomic().store(0, Ordering::Release);
    }

    /// Append one record. Producer side only.
    pub fn push(&self, payload: &[u8]) -> Result<(), RingError> {
        if payload.is_empty() {
            return Err(RingError::EmptyRecord);
        }
        if payload.len() > self.max_record() {
            return Err(RingError::RecordTooLarge {
                len: payload.len(),
                max: self.max_record(),
            });
        }
        let total = RECORD_HEADER + padded(payload.len());
        let tail = self.tail_atomic().load(Ordering::Relaxed);
        let head = self.head_atomic().load(Ordering::Acquire);
        let pos = (tail as usize) & (self.capacity - 1);
        let to_end = self.capacity - pos;
        let skip = if total > to_end { to_end } else { 0 };
        let used = tail.wrapping_sub(head) as usize;
        if used + skip + total > self.capacity {
            return Err(RingError::Full);
        }
        let mut cursor = tail;
        if skip > 0 {
            // SAFETY: pos..pos+4 lies in the data area (to_end >= 8).
            unsafe { write_u32(self.data(pos), SKIP_FLAG | skip as u32) };
            cursor += skip as u64;
        }
        let at = self.data((cursor as usize) & (self.capacity - 1));
        // SAFETY: the record fits before the end of the data area and the
        // space is free (checked against head above).
        unsafe {
            write_u32(at, payload.len() as u32);
            write_u32(at.add(4), 0);
            std::ptr::copy_nonoverlapping(payload.as_ptr(), at.add(RECORD_HEADER), payload.len());
        }
        self.tail_atomic()
            .store(cursor + total as u64, Ordering::Release);
        Ok(())
    }

    /// Visit up to `max_records` records in place, then release their space.
    /// Consumer side only. Returns the number of records visited.
    pub fn drain_with(
        &self,
        max_records: usize,
        mut visit: impl FnMut(&[u8]),
    ) -> Result<usize, RingError> {
        let mut head = self.head_atomic().load(Ordering::Relaxed);
        let tail = self.tail_atomic().load(Ordering::Acquire);
        let mut n = 0;
        while n < max_records && head < tail {
            let pos = (head as usize) & (self.capacity - 1);
            // SAFETY: pos is 8-aligned inside the data area and published.
            let header = unsafe { read_u32(self.data(pos)) };
            if header & SKIP_FLAG != 0 {
                let skip = (header & !SKIP_FLAG) as usize;
                if skip != self.capacity - pos {
                    return Err(RingError::Corrupt { header, cursor: head });
                }
                head += skip as u64;
                continue;
            }
            let len = header as usize;
            if len == 0 || len > self.max_record() || pos + RECORD_HEADER + len > self.capacity {
                return Err(RingError::Corrupt { header, cursor: head });
            }
            // SAFETY: the record was published by the producer's release
            // store of tail, which we acquired above.
            let payload =
                unsafe { std::slice::from_raw_parts(self.data(pos).add(RECORD_HEADER), len) };
            visit(payload);
            head += (RECORD_HEADER + padded(len)) as u64;
            n += 1;
        }
        self.head_atomic().store(head, Ordering::Release);
        Ok(n)
    }

    /// Pop up to `max_records` records in FIFO order. Consumer side only.
    pub fn drain_batch(&self, max_records: usize) -> Result<Vec<RingRecord>, RingError> {
        let mut out = Vec::new();
        self.drain_with(max_records, |p| {
            out.push(RingRecord {
                payload: p.to_vec(),
            })
        })?;
        Ok(out)
    }
}

unsafe fn write_u32(p: *mut u8, v: u32) {
    std::ptr::copy_nonoverlapping(v.to_le_bytes().as_ptr(), p, 4);
}

unsafe fn read_u32(p: *const u8) -> u32 {
    let mut b = [0u8; 4];
    std::ptr::copy_nonoverlapping(p, b.as_mut_ptr(), 4);
    u32::from_le_bytes(b)
}

/// Per-record drain callback used on the service side: records how many
/// records arrived and folds their bytes into a checksum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Drainer {
    pub records: u64,
    pub bytes: u64,
    pub checksum: u64,
}

impl Drainer {
    pub fn observe(&mut self, payload: &[u8]) {
        self.records += 1;
        self.bytes += payload.len() as u64;
        for &b in payload {
            self.checksum = self.checksum.rotate_left(5) ^ b as u64;
        }
    }
}

/// Deterministic sequence-numbered payload used by stress runs.
///
/// The length is drawn from `[1, max_len]` by a hash of `(seed, seq)`; the
/// first bytes carry `seq` and the rest is a position-dependent pattern, so
/// loss, reordering and corruption are all detectable.
pub fn stress_payload(seed: u64, seq: u64, max_len: usize, out: &mut Vec<u8>) {
    let h = splitmix64(seed ^ seq.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let len = 1 + (h % max_len as u64) as usize;
    out.clear();
    let seq_bytes = seq.to_le_bytes();
    out.extend((0..len).map(|j| {
        if j < 8 {
            seq_bytes[j]
        } else {
            (seq as u8).wrapping_mul(31).wrapping_add(j as u8) ^ (h >> 8) as u8
        }
    }));
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
