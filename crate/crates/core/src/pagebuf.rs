//! Page-aligned anonymous memory, the natural source buffer for protected
//! sends: the caller owns every page it spans.

use std::io;
use std::ptr::NonNull;

use crate::error::{Error, Result};
use crate::region::{BufferDesc, PageGeometry, PageRange};

pub struct PageBuf {
    ptr: NonNull<u8>,
    len: usize,
}

// SAFETY: plain owned memory.
unsafe impl Send for PageBuf {}
unsafe impl Sync for PageBuf {}

impl PageBuf {
    /// Zeroed mapping of `len` bytes rounded up to whole host pages.
    pub fn new(len: usize) -> Result<Self> {
        let geom = PageGeometry::host();
        let len = geom
            .round_up(len.max(1))
            .ok_or(Error::InvalidBuffer("allocation size overflows"))?;
        // SAFETY: anonymous private mapping, no file or address hint.
        let raw = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if raw == libc::MAP_FAILED {
            return Err(Error::Map(io::Error::last_os_error()));
        }
        Ok(PageBuf {
            ptr: NonNull::new(raw.cast()).expect("mmap never returns null on success"),
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.ptr.as_ptr()
    }

    pub fn as_mut_ptr(&mut self) -> *mut u8 {
        self.ptr.as_ptr()
    }

    pub fn as_slice(&self) -> &[u8] {
        // SAFETY: mapping is live and readable for `len` bytes.
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), self.len) }
    }

    /// Writes into pages guarding an in-flight send block until it completes.
    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        // SAFETY: exclusive borrow of a live mapping.
        unsafe { std::slice::from_raw_parts_mut(self.ptr.as_ptr(), self.len) }
    }

    /// Descriptor for `len` bytes at `offset`.
    pub fn desc(&self, offset: usize, len: usize) -> Result<BufferDesc> {
        if offset.checked_add(len).is_none_or(|end| end > self.len) {
            return Err(Error::InvalidBuffer("slice outside the page buffer"));
        }
        BufferDesc::new(self.ptr.as_ptr() as usize + offset, len)
    }

    /// Every page of the mapping.
    pub fn range(&self) -> PageRange {
        PageRange::new(self.ptr.as_ptr() as usize, self.len, PageGeometry::host()).expect("mapping is page aligned")
    }
}

impl Drop for PageBuf {
    fn drop(&mut self) {
        // SAFETY: unmapping exactly what `new` mapped.
        unsafe {
            libc::munmap(self.ptr.as_ptr().cast(), self.len);
        }
    }
}
