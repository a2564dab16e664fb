//! Address arithmetic: byte-granular buffers and the page ranges that cover them.

use std::fmt;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Protection granule of the platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PageGeometry {
    page_size: usize,
}

impl PageGeometry {
    pub const MIN_PAGE_SIZE: usize = 4096;

    /// Geometry with an explicit page size; must be a power of two of at
    /// least 4 KiB.
    pub fn new(page_size: usize) -> Result<Self> {
        if !page_size.is_power_of_two() || page_size < Self::MIN_PAGE_SIZE {
            return Err(Error::InvalidConfig(format!(
                "page size {page_size} is not a power of two >= {}",
                Self::MIN_PAGE_SIZE
            )));
        }
        Ok(PageGeometry { page_size })
    }

    /// Page size reported by the operating system, queried once.
    pub fn host() -> Self {
        static HOST: OnceLock<PageGeometry> = OnceLock::new();
        *HOST.get_or_init(|| {
            // SAFETY: sysconf has no memory-safety preconditions.
            let raw = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
            let size = usize::try_from(raw).unwrap_or(Self::MIN_PAGE_SIZE);
            PageGeometry::new(size).expect("platform page size is a power of two >= 4096")
        })
    }

    #[inline]
    pub const fn page_size(&self) -> usize {
        self.page_size
    }

    #[inline]
    pub const fn page_of(&self, addr: usize) -> usize {
        addr / self.page_size
    }

    #[inline]
    pub const fn align_down(&self, addr: usize) -> usize {
        addr & !(self.page_size - 1)
    }

    /// Rounds `n` up to a page multiple, `None` on overflow.
    #[inline]
    pub fn round_up(&self, n: usize) -> Option<usize> {
        n.checked_add(self.page_size - 1).map(|v| v & !(self.page_size - 1))
    }
}

/// A byte-granular, non-empty region of memory: the source of a send.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferDesc {
    start: usize,
    len: usize,
}

impl BufferDesc {
    pub fn new(start: usize, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidBuffer("length must be positive"));
        }
        if start.checked_add(len).is_none() {
            return Err(Error::InvalidBuffer("range overflows the address space"));
        }
        Ok(BufferDesc { start, len })
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        Self::new(bytes.as_ptr() as usize, bytes.len())
    }

    #[inline]
    pub const fn start(&self) -> usize {
        self.start
    }

    #[inline]
    pub const fn len(&self) -> usize {
        self.len
    }

    /// Always false; kept for API symmetry with slices.
    #[inline]
    pub const fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Exclusive end address.
    #[inline]
    pub const fn end(&self) -> usize {
        self.start + self.len
    }

    #[inline]
    pub const fn contains(&self, addr: usize) -> bool {
        addr >= self.start && addr < self.end()
    }

    pub fn as_raw(&self) -> *const [u8] {
        std::ptr::slice_from_raw_parts(self.start as *const u8, self.len)
    }
}

impl fmt::Debug for BufferDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BufferDesc({:#x}..{:#x})", self.start, self.end())
    }
}

/// A page-aligned interval whose length is a positive page multiple.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PageRange {
    start: usize,
    len: usize,
}

impl PageRange {
    pub fn new(start: usize, len: usize, geom: PageGeometry) -> Result<Self> {
        let ps = geom.page_size();
        if !start.is_multiple_of(ps) {
            return Err(Error::InvalidBuffer("range start is not page aligned"));
        }
        if len == 0 || !len.is_multiple_of(ps) {
            return Err(Error::InvalidBuffer("range length is not a positive page multiple"));
        }
        if start.checked_add(len).is_none() {
            return Err(Error::InvalidBuffer("range overflows the address space"));
        }
        Ok(PageRange { start, len })
    }

    pub(crate) const fn from_parts(start: usize, len: usize) -> Self {
        PageRange { start, len }
    }

    /// Single page containing `addr`.
    pub fn page_containing(addr: usize, geom: PageGeometry) -> Self {
        PageRange {
            start: geom.align_down(addr),
            len: geom.page_size(),
        }
    }

    #[inline]
    pub const fn start(&self) -> usize {
        self.start
    }

    #[inline]
    pub const fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub const fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub const fn end(&self) -> usize {
        self.start + self.len
    }

    #[inline]
    pub const fn contains(&self, addr: usize) -> bool {
        addr >= self.start && addr < self.end()
    }

    pub fn contains_buffer(&self, buf: &BufferDesc) -> bool {
        buf.start() >= self.start && buf.end() <= self.end()
    }

    /// Page indices (address / page size) covered by the range.
    pub fn pages(&self, geom: PageGeometry) -> std::ops::Range<usize> {
        geom.page_of(self.start)..geom.page_of(self.end())
    }

    pub fn page_count(&self, geom: PageGeometry) -> usize {
        self.len / geom.page_size()
    }
}

impl fmt::Debug for PageRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PageRange({:#x}..{:#x})", self.start, self.end())
    }
}

/// Smallest page-aligned, page-multiple range containing `buffer`.
///
/// The start is `buffer.start` rounded down; the covered length is
/// `buffer.len + (buffer.start - page_start)` rounded up to a whole page.
pub fn align_to_pages(buffer: BufferDesc, geom: PageGeometry) -> PageRange {
    let page_start = geom.align_down(buffer.start());
    let prot_len = buffer.len() + (buffer.start() - page_start);
    // A BufferDesc never ends past usize::MAX, so the rounded end fits unless
    // the buffer touches the very last page of the address space.
    let len = geom
        .round_up(prot_len)
        .expect("buffer extends into the final page of the address space");
    PageRange {
        start: page_start,
        len,
    }
}

/// Coalesces sorted page indices into contiguous ranges.
pub fn coalesce_pages(pages: &[usize], geom: PageGeometry) -> Vec<PageRange> {
    let ps = geom.page_size();
    let mut out: Vec<PageRange> = Vec::new();
    for &p in pages {
        let addr = p * ps;
        match out.last_mut() {
            Some(last) if last.end() == addr => last.len += ps,
            _ => out.push(PageRange { start: addr, len: ps }),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g4k() -> PageGeometry {
        PageGeometry::new(4096).unwrap()
    }

    #[test]
    fn align_examples() {
        let g = g4k();
        let r = align_to_pages(BufferDesc::new(0x1004, 8).unwrap(), g);
        assert_eq!((r.start(), r.len()), (0x1000, 4096));
        let r = align_to_pages(BufferDesc::new(0x1000, 4096).unwrap(), g);
        assert_eq!((r.start(), r.len()), (0x1000, 4096));
        let r = align_to_pages(BufferDesc::new(0x1ffc, 8).unwrap(), g);
        assert_eq!((r.start(), r.len()), (0x1000, 8192));
    }

    #[test]
    fn geometry_rejects_bad_sizes() {
        assert!(PageGeometry::new(1000).is_err());
        assert!(PageGeometry::new(2048).is_err());
        assert!(PageGeometry::new(16384).is_ok());
        let host = PageGeometry::host().page_size();
        assert!(host.is_power_of_two() && host >= 4096);
    }

    #[test]
    fn buffer_desc_invariants() {
        assert!(BufferDesc::new(0x1000, 0).is_err());
        assert!(BufferDesc::new(usize::MAX - 3, 8).is_err());
        assert!(BufferDesc::new(usize::MAX - 8, 8).is_ok());
    }

    #[test]
    fn page_range_invariants() {
        let g = g4k();
        assert!(PageRange::new(0x1001, 4096, g).is_err());
        assert!(PageRange::new(0x1000, 100, g).is_err());
        assert!(PageRange::new(0x1000, 0, g).is_err());
        let r = PageRange::new(0x2000, 3 * 4096, g).unwrap();
        assert_eq!(r.pages(g), 2..5);
    }

    #[test]
    fn coalesce_runs() {
        let g = g4k();
        let rs = coalesce_pages(&[1, 2, 3, 7, 9, 10], g);
        let got: Vec<_> = rs.iter().map(|r| (r.start(), r.len())).collect();
        assert_eq!(got, vec![(0x1000, 3 * 4096), (0x7000, 4096), (0x9000, 2 * 4096)]);
    }

    proptest! {
        #[test]
        fn aligned_range_is_minimal_cover(
            shift in 12u32..17,
            start in 0usize..(1 << 40),
            len in 1usize..(1 << 22),
        ) {
            let g = PageGeometry::new(1 << shift).unwrap();
            let ps = g.page_size();
            let buf = BufferDesc::new(start, len).unwrap();
            let r = align_to_pages(buf, g);
            prop_assert_eq!(r.start() % ps, 0);
            prop_assert!(!r.is_empty() && r.len().is_multiple_of(ps));
            prop_assert!(r.contains_buffer(&buf));
            // Minimal: first and last page both intersect the buffer.
            prop_assert!(buf.start() < r.start() + ps);
            prop_assert!(buf.end() > r.end() - ps);
        }
    }
}
