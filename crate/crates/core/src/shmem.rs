// SPDX-License-Identifier: Apache-2.0

//! Per-task shared memory segments.
//!
//! The service side owns a [`Manager`]: a hash map from task ID to a
//! fixed-length segment backed by a named POSIX shared-memory object
//! (`sbpf-<session-uuid>-<task_id>`). The user side maps the same object by
//! name and addresses it only through segment-relative offsets; the real
//! mapping address is never disclosed, only a randomized 64-bit handle.
//!
//! Segment layout (default 1 MiB):
//!
//! ```text
//! [0, 512 KiB)        per-thread args / return-value slots
//! [512 KiB, 768 KiB)  perceptron model weights
//! [768 KiB, 1 MiB)    SPSC ring (header + data)
//! ```

use std::collections::HashMap;
use std::ffi::CString;
use std::io;
use std::ptr::NonNull;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use uuid::Uuid;

pub const SEG_SIZE: usize = 1 << 20;
pub const THREAD_POOL_OFFSET: usize = 0;
pub const THREAD_POOL_SIZE: usize = 512 << 10;
pub const PSS_REGION_OFFSET: usize = 512 << 10;
pub const PSS_REGION_SIZE: usize = 256 << 10;
pub const RING_REGION_OFFSET: usize = 768 << 10;
pub const RING_REGION_SIZE: usize = 256 << 10;

pub type TaskId = u64;

#[derive(Debug, Error)]
pub enum ShmError {
    #[error("task {0} already holds a segment")]
    AlreadyAllocated(TaskId),
    #[error("task {0} has no segment")]
    NotFound(TaskId),
    #[error("shared memory backing failed: {0}")]
    OutOfMemory(#[source] io::Error),
    #[error("thread {thread} outside slot pool of {max_threads}")]
    InvalidThread { thread: usize, max_threads: usize },
    #[error("access [{offset}, {offset}+{len}) outside segment of {size} bytes")]
    OutOfBounds { offset: u64, len: u64, size: usize },
    #[error("thread slot layout does not fit the thread pool region")]
    LayoutTooLarge,
}

/// A mapped POSIX shared-memory object.
pub struct ShmMapping {
    ptr: NonNull<u8>,
    len: usize,
    name: String,
    owner: Mutex<bool>,
}

// SAFETY: the mapping is plain shared bytes; all access goes through raw
// pointer copies or atomics and the mapping lives until drop.
unsafe impl Send for ShmMapping {}
unsafe impl Sync for ShmMapping {}

impl ShmMapping {
    /// Create, size and map a new object. Fails if the name already exists.
    pub fn create(name: &str, len: usize) -> io::Result<Self> {
        let cname = shm_name(name)?;
        // SAFETY: FFI calls with a valid NUL-terminated name; fd is closed
        // on every path after mmap.
        unsafe {
            let fd = libc::shm_open(
                cname.as_ptr(),
                libc::O_CREAT | libc::O_EXCL | libc::O_RDWR,
                0o600,
            );
            if fd < 0 {
                return Err(io::Error::last_os_error());
            }
            if libc::ftruncate(fd, len as libc::off_t) != 0 {
                let err = io::Error::last_os_error();
                libc::close(fd);
                libc::shm_unlink(cname.as_ptr());
                return Err(err);
            }
            let ptr = map_fd(fd, len);
            libc::close(fd);
            match ptr {
                Ok(ptr) => Ok(ShmMapping {
                    ptr,
                    len,
                    name: name.to_string(),
                    owner: Mutex::new(true),
                }),
                Err(e) => {
                    libc::shm_unlink(cname.as_ptr());
                    Err(e)
                }
            }
        }
    }

    /// Map an existing object created by another process.
    pub fn open(name: &str) -> io::Result<Self> {
        let cname = shm_name(name)?;
        // SAFETY: as in `create`.
        unsafe {
            let fd = libc::shm_open(cname.as_ptr(), libc::O_RDWR, 0);
            if fd < 0 {
                return Err(io::Error::last_os_error());
            }
            let mut st: libc::stat = std::mem::zeroed();
            if libc::fstat(fd, &mut st) != 0 {
                let err = io::Error::last_os_error();
                libc::close(fd);
                return Err(err);
            }
            let len = st.st_size as usize;
            let ptr = map_fd(fd, len);
            libc::close(fd);
            Ok(ShmMapping {
                ptr: ptr?,
                len,
                name: name.to_string(),
                owner: Mutex::new(false),
            })
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn as_ptr(&self) -> *mut u8 {
        self.ptr.as_ptr()
    }

    /// Remove the name. Existing mappings stay valid until unmapped.
    pub fn unlink(&self) {
        let mut owner = self.owner.lock().unwrap();
        if *owner {
            if let Ok(cname) = shm_name(&self.name) {
                // SAFETY: valid C string.
                unsafe { libc::shm_unlink(cname.as_ptr()) };
            }
            *owner = false;
        }
    }
}

impl Drop for ShmMapping {
    fn drop(&mut self) {
        self.unlink();
        // SAFETY: ptr/len came from a successful mmap.
        unsafe { libc::munmap(self.ptr.as_ptr().cast(), self.len) };
    }
}

impl std::fmt::Debug for ShmMapping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShmMapping")
            .field("name", &self.name)
            .field("len", &self.len)
            .finish()
    }
}

fn shm_name(name: &str) -> io::Result<CString> {
    CString::new(format!("/{name}")).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))
}

unsafe fn map_fd(fd: libc::c_int, len: usize) -> io::Result<NonNull<u8>> {
    let ptr = libc::mmap(
        std::ptr::null_mut(),
        len,
        libc::PROT_READ | libc::PROT_WRITE,
        libc::MAP_SHARED,
        fd,
        0,
    );
    if ptr == libc::MAP_FAILED {
        return Err(io::Error::last_os_error());
    }
    Ok(NonNull::new(ptr.cast()).expect("mmap returned null"))
}

/// Bounds-checked, offset-addressed access to a mapped segment.
///
/// Cloning is cheap; every clone refers to the same mapping.
#[derive(Clone, Debug)]
pub struct SegmentView {
    map: Arc<ShmMapping>,
    base_handle: u64,
}

impl SegmentView {
    pub fn new(map: Arc<ShmMapping>, base_handle: u64) -> Self {
        SegmentView { map, base_handle }
    }

    /// Attach to a segment published by the service.
    pub fn attach(name: &str, base_handle: u64) -> io::Result<Self> {
        Ok(Self::new(Arc::new(ShmMapping::open(name)?), base_handle))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn handle(&self) -> u64 {
        self.base_handle
    }

    pub fn name(&self) -> &str {
        self.map.name()
    }

    pub fn mapping(&self) -> &Arc<ShmMapping> {
        &self.map
    }

    /// Validate `[offset, offset + len)` and return it as a `usize` range start.
    pub fn check(&self, offset: u64, len: u64) -> Result<usize, ShmError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.len() as u64 => Ok(offset as usize),
            _ => Err(ShmError::OutOfBounds {
                offset,
                len,
                size: self.len(),
            }),
        }
    }

    /// Raw pointer to `offset`, after bounds checking `len` bytes.
    pub fn ptr(&self, offset: u64, len: u64) -> Result<*mut u8, ShmError> {
        let off = self.check(offset, len)?;
        // SAFETY: off + len is within the mapping.
        Ok(unsafe { self.map.as_ptr().add(off) })
    }

    pub fn read(&self, offset: u64, dst: &mut [u8]) -> Result<(), ShmError> {
        let src = self.ptr(offset, dst.len() as u64)?;
        // SAFETY: bounds checked; the mapping never overlaps a Rust slice.
        unsafe { std::ptr::copy_nonoverlapping(src, dst.as_mut_ptr(), dst.len()) };
        Ok(())
    }

    pub fn write(&self, offset: u64, src: &[u8]) -> Result<(), ShmError> {
        let dst = self.ptr(offset, src.len() as u64)?;
        // SAFETY: bounds checked; the mapping never overlaps a Rust slice.
        unsafe { std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len()) };
        Ok(())
    }

    pub fn read_u64(&self, offset: u64) -> Result<u64, ShmError> {
        let mut b = [0u8; 8];
        self.read(offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn write_u64(&self, offset: u64, value: u64) -> Result<(), ShmError> {
        self.write(offset, &value.to_le_bytes())
    }

    pub fn fill(&self, offset: u64, len: u64, byte: u8) -> Result<(), ShmError> {
        let dst = self.ptr(offset, len)?;
        // SAFETY: bounds checked.
        unsafe { std::ptr::write_bytes(dst, byte, len as usize) };
        Ok(())
    }

    /// Copy of the whole segment; meant for tests and diagnostics.
    pub fn snapshot(&self, offset: u64, len: u64) -> Result<Vec<u8>, ShmError> {
        let mut v = vec![0; len as usize];
        self.read(offset, &mut v)?;
        Ok(v)
    }
}

/// Partition of the thread pool into per-thread args and return-value slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThreadSlotLayout {
    pub pool_base: usize,
    pub args_size: usize,
    pub ret_size: usize,
    pub max_threads: usize,
}

impl Default for ThreadSlotLayout {
    fn default() -> Self {
        ThreadSlotLayout {
            pool_base: THREAD_POOL_OFFSET,
            args_size: 4096,
            ret_size: 4096,
            max_threads: 64,
        }
    }
}

impl ThreadSlotLayout {
    fn stride(&self) -> usize {
        self.args_size + self.ret_size
    }

    fn check_thread(&self, thread: usize) -> Result<(), ShmError> {
        if thread < self.max_threads {
            Ok(())
        } else {
            Err(ShmError::InvalidThread {
                thread,
                max_threads: self.max_threads,
            })
        }
    }

    pub fn args_offset(&self, thread: usize) -> Result<usize, ShmError> {
        self.check_thread(thread)?;
        Ok(self.pool_base + thread * self.stride())
    }

    pub fn ret_offset(&self, thread: usize) -> Result<usize, ShmError> {
        Ok(self.args_offset(thread)? + self.args_size)
    }

    /// Check that every slot lies inside the thread pool region.
    pub fn validate(&self) -> Result<(), ShmError> {
        let end = self
            .max_threads
            .checked_mul(self.stride())
            .and_then(|n| n.checked_add(self.pool_base));
        match end {
            Some(end) if end <= THREAD_POOL_OFFSET + THREAD_POOL_SIZE => Ok(()),
            _ => Err(ShmError::LayoutTooLarge),
        }
    }
}

/// One task's segment as seen by the service.
#[derive(Debug)]
pub struct SharedSegment {
    pub task_id: TaskId,
    view: SegmentView,
    slot_locks: Vec<Mutex<()>>,
}

impl SharedSegment {
    pub fn size(&self) -> usize {
        self.view.len()
    }

    pub fn base_handle(&self) -> u64 {
        self.view.handle()
    }

    pub fn name(&self) -> &str {
        self.view.name()
    }

    pub fn view(&self) -> &SegmentView {
        &self.view
    }

    /// Serializes service-side access to one thread's slot pair.
    pub fn slot_lock(&self, thread: usize) -> Option<&Mutex<()>> {
        self.slot_locks.get(thread)
    }
}

/// The service-side segment table.
pub struct Manager {
    session: Uuid,
    seg_size: usize,
    layout: ThreadSlotLayout,
    table: Mutex<HashMap<TaskId, Arc<SharedSegment>>>,
    rng: Mutex<ChaCha8Rng>,
}

impl Manager {
    pub fn new(seed: Option<u64>) -> Self {
        Self::with_layout(seed, SEG_SIZE, ThreadSlotLayout::default())
    }

    pub fn with_layout(seed: Option<u64>, seg_size: usize, layout: ThreadSlotLayout) -> Self {
        let rng = match seed {
            Some(s) => ChaCha8Rng::seed_from_u64(s),
            None => ChaCha8Rng::from_entropy(),
        };
        Manager {
            session: Uuid::new_v4(),
            seg_size,
            layout,
            table: Mutex::new(HashMap::new()),
            rng: Mutex::new(rng),
        }
    }

    pub fn session(&self) -> Uuid {
        self.session
    }

    pub fn layout(&self) -> ThreadSlotLayout {
        self.layout
    }

    pub fn segment_name(&self, task_id: TaskId) -> String {
        format!("sbpf-{}-{}", self.session, task_id)
    }

    pub fn allocate(&self, task_id: TaskId) -> Result<Arc<SharedSegment>, ShmError> {
        let mut table = self.table.lock().unwrap();
        if table.contains_key(&task_id) {
            return Err(ShmError::AlreadyAllocated(task_id));
        }
        let map = ShmMapping::create(&self.segment_name(task_id), self.seg_size)
            .map_err(ShmError::OutOfMemory)?;
        let real = map.as_ptr() as u64;
        let handle = {
            let mut rng = self.rng.lock().unwrap();
            loop {
                let h: u64 = rng.gen();
                if h != real {
                    break h;
                }
            }
        };
        let seg = Arc::new(SharedSegment {
            task_id,
            view: SegmentView::new(Arc::new(map), handle),
            slot_locks: (0..self.layout.max_threads).map(|_| Mutex::new(())).collect(),
        });
        table.insert(task_id, seg.clone());
        log::debug!("allocated segment for task {task_id}");
        Ok(seg)
    }

    /// Return the task's segment, allocating one if it has none.
    pub fn allocate_or_reuse(&self, task_id: TaskId) -> Result<Arc<SharedSegment>, ShmError> {
        match self.allocate(task_id) {
            Err(ShmError::AlreadyAllocated(_)) => self.lookup(task_id),
            r => r,
        }
    }

    pub fn lookup(&self, task_id: TaskId) -> Result<Arc<SharedSegment>, ShmError> {
        self.table
            .lock()
            .unwrap()
            .get(&task_id)
            .cloned()
            .ok_or(ShmError::NotFound(task_id))
    }

    pub fn release(&self, task_id: TaskId) -> Result<(), ShmError> {
        let seg = self
            .table
            .lock()
            .unwrap()
            .remove(&task_id)
            .ok_or(ShmError::NotFound(task_id))?;
        seg.view.mapping().unlink();
        log::debug!("released segment for task {task_id}");
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Drop for Manager {
    fn drop(&mut self) {
        for seg in self.table.get_mut().unwrap().values() {
            seg.view.mapping().unlink();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_segment_is_zeroed() {
        let m = Manager::new(Some(1));
        let seg = m.allocate(42).unwrap();
        let again = m.lookup(42).unwrap();
        assert!(Arc::ptr_eq(&seg, &again));
        assert_eq!(seg.size(), SEG_SIZE);
        let bytes = seg.view().snapshot(0, SEG_SIZE as u64).unwrap();
        assert!(bytes.iter().all(|&b| b == 0));
    }

    #[test]
    fn one_segment_per_task() {
        let m = Manager::new(Some(1));
        m.allocate(42).unwrap();
        assert!(matches!(m.allocate(42), Err(ShmError::AlreadyAllocated(42))));
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn handles_depend_on_seed() {
        let a = Manager::new(Some(1)).allocate(1).unwrap().base_handle();
        let b = Manager::new(Some(2)).allocate(1).unwrap().base_handle();
        assert_ne!(a, b);
    }

    #[test]
    fn lifecycle() {
        let m = Manager::new(Some(3));
        let h1 = m.allocate(7).unwrap().base_handle();
        m.release(7).unwrap();
        assert!(matches!(m.lookup(7), Err(ShmError::NotFound(7))));
        assert!(matches!(m.release(7), Err(ShmError::NotFound(7))));
        let h2 = m.allocate(7).unwrap().base_handle();
        assert_ne!(h1, h2);
        assert!(matches!(m.release(8), Err(ShmError::NotFound(8))));
    }

    #[test]
    fn handle_is_not_the_mapping_address() {
        let m = Manager::new(None);
        let seg = m.allocate(1).unwrap();
        assert_ne!(seg.base_handle(), seg.view().mapping().as_ptr() as u64);
    }

    #[test]
    fn second_mapping_is_coherent() {
        let m = Manager::new(Some(4));
        let seg = m.allocate(9).unwrap();
        let user = SegmentView::attach(seg.name(), seg.base_handle()).unwrap();
        user.write_u64(8, 0xdead_beef).unwrap();
        assert_eq!(seg.view().read_u64(8).unwrap(), 0xdead_beef);
        assert_eq!(user.len(), SEG_SIZE);
    }

    #[test]
    fn released_name_cannot_be_attached() {
        let m = Manager::new(Some(5));
        let name = m.allocate(3).unwrap().name().to_string();
        m.release(3).unwrap();
        assert!(SegmentView::attach(&name, 0).is_err());
    }

    #[test]
    fn view_bounds() {
        let m = Manager::new(Some(6));
        let v = m.allocate(1).unwrap().view().clone();
        assert!(v.write_u64(SEG_SIZE as u64 - 8, 1).is_ok());
        assert!(v.write_u64(SEG_SIZE as u64 - 7, 1).is_err());
        assert!(v.read_u64(u64::MAX - 3).is_err());
    }

    #[test]
    fn slot_offsets() {
        let l = ThreadSlotLayout::default();
        assert_eq!(l.args_offset(0).unwrap(), 0);
        assert_eq!(l.args_offset(3).unwrap(), 24576);
        assert!(matches!(l.args_offset(64), Err(ShmError::InvalidThread { .. })));
        assert_eq!(l.ret_offset(0).unwrap(), 4096);
        assert_eq!(l.ret_offset(3).unwrap(), 28672);
        assert!(l.ret_offset(200).is_err());
        l.validate().unwrap();
        let too_big = ThreadSlotLayout {
            max_threads: 65,
            ..l
        };
        assert!(too_big.validate().is_err());
    }
}
