//! Which in-flight sends guard which pages.
//!
//! The registry has two sides. Mutations ([`register`], [`release`]) run in
//! normal context and are serialized internally. [`lookup`] runs inside the
//! protection-fault handler: it never allocates and never waits on a lock
//! held across anything but a few stores.
//!
//! Storage is fixed at construction:
//!
//! * op slots, one per concurrently guarded send, each carrying its page
//!   range, buffer extent and completion handle. Readers pin a slot with a
//!   reader count before touching its contents; retiring a slot waits for
//!   the count to drain.
//! * a page table mapping page index to the number of live ops covering the
//!   page, open addressing behind a sequence lock.
//!
//! A page stays protected while its count is non-zero. Protection changes go
//! through a [`Protector`] while the registry's write lock is held, so the
//! fault handler's "is anything still in flight here?" check and a new send
//! protecting the same page cannot interleave.
//!
//! [`register`]: RegionRegistry::register
//! [`release`]: RegionRegistry::release
//! [`lookup`]: RegionRegistry::lookup

use std::cell::UnsafeCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{fence, AtomicBool, AtomicPtr, AtomicU32, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::region::{align_to_pages, BufferDesc, PageGeometry, PageRange};
use crate::stats::GuardCounters;
use crate::transport::CompletionHandle;

/// Identifier of a guarded send.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpId(u64);

impl OpId {
    /// Process-unique, increasing.
    pub fn next() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        OpId(NEXT.fetch_add(1, Ordering::Relaxed))
    }

    pub const fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpState {
    InFlight,
    Complete,
    Released,
}

/// One send whose source pages are (about to be) read-only.
#[derive(Debug, Clone)]
pub struct GuardedOp {
    pub id: OpId,
    pub handle: CompletionHandle,
    pub range: PageRange,
    pub buffer: BufferDesc,
    /// Where fault statistics for this op are charged.
    pub counters: Option<&'static GuardCounters>,
}

impl GuardedOp {
    pub fn new(handle: CompletionHandle, buffer: BufferDesc, geom: PageGeometry) -> Self {
        GuardedOp {
            id: OpId::next(),
            handle,
            range: align_to_pages(buffer, geom),
            buffer,
            counters: None,
        }
    }

    pub fn with_counters(mut self, counters: &'static GuardCounters) -> Self {
        self.counters = Some(counters);
        self
    }

    pub fn state(&self) -> OpState {
        if self.handle.is_complete() {
            OpState::Complete
        } else {
            OpState::InFlight
        }
    }
}

/// Applies and removes write protection. The registry calls it with its
/// write lock held; implementations must not allocate or block.
pub trait Protector {
    fn protect(&self, range: PageRange) -> Result<()>;
    fn unprotect(&self, range: PageRange) -> Result<()>;
}

/// Bookkeeping only.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoProtection;

impl Protector for NoProtection {
    fn protect(&self, _: PageRange) -> Result<()> {
        Ok(())
    }

    fn unprotect(&self, _: PageRange) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegistryConfig {
    /// Concurrently guarded sends.
    pub op_capacity: usize,
    /// Distinct pages under guard at once.
    pub page_capacity: usize,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            op_capacity: 4096,
            page_capacity: 1 << 16,
        }
    }
}

/// Outcome of [`RegionRegistry::release`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Released {
    pub id: OpId,
    /// Pages whose count dropped to zero, ascending.
    pub freed_pages: Vec<usize>,
}

// --- write lock -----------------------------------------------------------

struct SpinLock(AtomicBool);

impl SpinLock {
    fn lock(&self) -> SpinGuard<'_> {
        let mut spins = 0u32;
        while self
            .0
            .compare_exchange_weak(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            if spins < 64 {
                std::hint::spin_loop();
                spins += 1;
            } else {
                // SAFETY: sched_yield is async-signal-safe and has no preconditions.
                unsafe { libc::sched_yield() };
            }
        }
        SpinGuard(self)
    }
}

struct SpinGuard<'a>(&'a SpinLock);

impl Drop for SpinGuard<'_> {
    fn drop(&mut self) {
        self.0 .0.store(false, Ordering::Release);
    }
}

// --- page table -----------------------------------------------------------

const EMPTY: usize = usize::MAX;

struct PageTable {
    keys: Box<[AtomicUsize]>,
    counts: Box<[AtomicU32]>,
    shift: u32,
    seq: AtomicU64,
    len: AtomicUsize,
    capacity: usize,
}

impl PageTable {
    fn new(capacity: usize) -> Self {
        let slots = (capacity.max(1) * 2).next_power_of_two().max(16);
        PageTable {
            keys: (0..slots).map(|_| AtomicUsize::new(EMPTY)).collect(),
            counts: (0..slots).map(|_| AtomicU32::new(0)).collect(),
            shift: usize::BITS - slots.trailing_zeros(),
            seq: AtomicU64::new(0),
            len: AtomicUsize::new(0),
            capacity,
        }
    }

    #[inline]
    fn mask(&self) -> usize {
        self.keys.len() - 1
    }

    #[inline]
    fn home(&self, page: usize) -> usize {
        (page.wrapping_mul(0x9e37_79b9_7f4a_7c15_u64 as usize)) >> self.shift
    }

    /// Lock-free read; retries while a writer is mid-update.
    fn count(&self, page: usize) -> u32 {
        loop {
            let s1 = self.seq.load(Ordering::Acquire);
            if s1 & 1 == 1 {
                std::hint::spin_loop();
                continue;
            }
            let mut i = self.home(page);
            let mut found = 0;
            for _ in 0..self.keys.len() {
                let k = self.keys[i].load(Ordering::Relaxed);
                if k == page {
                    found = self.counts[i].load(Ordering::Relaxed);
                    break;
                }
                if k == EMPTY {
                    break;
                }
                i = (i + 1) & self.mask();
            }
            fence(Ordering::Acquire);
            if self.seq.load(Ordering::Relaxed) == s1 {
                return found;
            }
        }
    }

    fn begin_write(&self) {
        self.seq.fetch_add(1, Ordering::Relaxed);
        fence(Ordering::Release);
    }

    fn end_write(&self) {
        self.seq.fetch_add(1, Ordering::Release);
    }

    // Writers below hold the registry write lock and bracket calls with
    // begin_write/end_write.

    fn find(&self, page: usize) -> Option<usize> {
        let mut i = self.home(page);
        loop {
            let k = self.keys[i].load(Ordering::Relaxed);
            if k == page {
                return Some(i);
            }
            if k == EMPTY {
                return None;
            }
            i = (i + 1) & self.mask();
        }
    }

    fn increment(&self, page: usize) {
        if let Some(i) = self.find(page) {
            self.counts[i].fetch_add(1, Ordering::Relaxed);
            return;
        }
        let mut i = self.home(page);
        while self.keys[i].load(Ordering::Relaxed) != EMPTY {
            i = (i + 1) & self.mask();
        }
        self.counts[i].store(1, Ordering::Relaxed);
        self.keys[i].store(page, Ordering::Relaxed);
        self.len.fetch_add(1, Ordering::Relaxed);
    }

    /// Returns true when the count reached zero and the entry was removed.
    fn decrement(&self, page: usize) -> bool {
        let i = self.find(page).expect("decrement of an untracked page");
        let prev = self.counts[i].fetch_sub(1, Ordering::Relaxed);
        debug_assert!(prev > 0);
        if prev != 1 {
            return false;
        }
        self.remove_at(i);
        self.len.fetch_sub(1, Ordering::Relaxed);
        true
    }

    // Backward-shift deletion keeps probe chains intact without tombstones.
    fn remove_at(&self, mut hole: usize) {
        let mask = self.mask();
        let mut j = hole;
        loop {
            j = (j + 1) & mask;
            let k = self.keys[j].load(Ordering::Relaxed);
            if k == EMPTY {
                break;
            }
            let home = self.home(k);
            // Move k back if its home is not in the cyclic interval (hole, j].
            let stays = if hole <= j {
                hole < home && home <= j
            } else {
                hole < home || home <= j
            };
            if !stays {
                self.keys[hole].store(k, Ordering::Relaxed);
                self.counts[hole].store(self.counts[j].load(Ordering::Relaxed), Ordering::Relaxed);
                hole = j;
            }
        }
        self.keys[hole].store(EMPTY, Ordering::Relaxed);
        self.counts[hole].store(0, Ordering::Relaxed);
    }

    fn missing_pages(&self, pages: std::ops::Range<usize>) -> usize {
        pages.filter(|&p| self.find(p).is_none()).count()
    }
}

// --- op slots -------------------------------------------------------------

const FREE: u8 = 0;
const RESERVED: u8 = 1;
const LIVE: u8 = 2;
const RETIRING: u8 = 3;

struct OpSlot {
    state: AtomicU8,
    readers: AtomicU32,
    seq: AtomicU64,
    id: AtomicU64,
    range_start: AtomicUsize,
    range_len: AtomicUsize,
    buf_start: AtomicUsize,
    buf_len: AtomicUsize,
    counters: AtomicPtr<GuardCounters>,
    unprotected_in_fault: AtomicBool,
    handle: UnsafeCell<Option<CompletionHandle>>,
}

// SAFETY: `handle` is written only while the slot is not LIVE and no reader
// is pinned, and read only by pinned readers of a LIVE slot.
unsafe impl Sync for OpSlot {}

impl OpSlot {
    fn new() -> Self {
        OpSlot {
            state: AtomicU8::new(FREE),
            readers: AtomicU32::new(0),
            seq: AtomicU64::new(0),
            id: AtomicU64::new(0),
            range_start: AtomicUsize::new(0),
            range_len: AtomicUsize::new(0),
            buf_start: AtomicUsize::new(0),
            buf_len: AtomicUsize::new(0),
            counters: AtomicPtr::new(std::ptr::null_mut()),
            unprotected_in_fault: AtomicBool::new(false),
            handle: UnsafeCell::new(None),
        }
    }

    fn pin(&self) -> Option<OpRef<'_>> {
        self.readers.fetch_add(1, Ordering::SeqCst);
        if self.state.load(Ordering::SeqCst) == LIVE {
            Some(OpRef { slot: self })
        } else {
            self.readers.fetch_sub(1, Ordering::SeqCst);
            None
        }
    }

    fn wait_unpinned(&self) {
        let mut spins = 0u32;
        while self.readers.load(Ordering::SeqCst) != 0 {
            if spins < 64 {
                std::hint::spin_loop();
                spins += 1;
            } else {
                std::thread::yield_now();
            }
        }
    }
}

/// A pinned view of a registered op; the slot cannot be recycled while this
/// exists. Dropping it is fault-context-safe.
pub struct OpRef<'a> {
    slot: &'a OpSlot,
}

impl OpRef<'_> {
    pub fn id(&self) -> OpId {
        OpId(self.slot.id.load(Ordering::Relaxed))
    }

    pub fn range(&self) -> PageRange {
        let s = self.slot;
        // Validated when the op was registered.
        PageRange::from_parts(s.range_start.load(Ordering::Relaxed), s.range_len.load(Ordering::Relaxed))
    }

    pub fn buffer_contains(&self, addr: usize) -> bool {
        let start = self.slot.buf_start.load(Ordering::Relaxed);
        let len = self.slot.buf_len.load(Ordering::Relaxed);
        addr >= start && addr - start < len
    }

    fn range_contains(&self, addr: usize) -> bool {
        let start = self.slot.range_start.load(Ordering::Relaxed);
        let len = self.slot.range_len.load(Ordering::Relaxed);
        addr >= start && addr - start < len
    }

    fn registration_seq(&self) -> u64 {
        self.slot.seq.load(Ordering::Relaxed)
    }

    pub fn handle(&self) -> &CompletionHandle {
        // SAFETY: pinned LIVE slot; the handle is immutable while LIVE.
        unsafe { (*self.slot.handle.get()).as_ref().expect("live slot has a handle") }
    }

    #[inline]
    pub fn is_complete(&self) -> bool {
        self.handle().is_complete()
    }

    pub fn state(&self) -> OpState {
        if self.is_complete() {
            OpState::Complete
        } else {
            OpState::InFlight
        }
    }

    pub fn counters(&self) -> Option<&'static GuardCounters> {
        let p = self.slot.counters.load(Ordering::Relaxed);
        // SAFETY: only `&'static GuardCounters` are ever stored.
        unsafe { p.as_ref() }
    }

    pub fn unprotected_in_fault(&self) -> bool {
        self.slot.unprotected_in_fault.load(Ordering::Relaxed)
    }
}

impl Drop for OpRef<'_> {
    fn drop(&mut self) {
        self.slot.readers.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Summary of what guards the page around a faulting address.
#[derive(Debug, Clone, Copy, Default)]
pub struct PageOwners {
    /// Live ops (in flight or complete-but-unreleased) covering the page.
    pub live: usize,
    pub in_flight: usize,
    /// Whether the address lies inside some live op's buffer.
    pub addr_in_buffer: bool,
    pub counters: Option<&'static GuardCounters>,
}

struct Index {
    by_id: HashMap<OpId, usize>,
    free: Vec<usize>,
}

/// Slot claimed ahead of posting a send, so a full registry is detected
/// before any zero-copy transfer starts. Dropping it returns the slot.
pub struct Reservation<'a> {
    registry: &'a RegionRegistry,
    slot: Option<usize>,
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        if let Some(i) = self.slot.take() {
            self.registry.slots[i].state.store(FREE, Ordering::SeqCst);
            self.registry.index.lock().unwrap().free.push(i);
        }
    }
}

pub struct RegionRegistry {
    geom: PageGeometry,
    slots: Box<[OpSlot]>,
    pages: PageTable,
    high_water: AtomicUsize,
    next_seq: AtomicU64,
    write: SpinLock,
    index: Mutex<Index>,
}

impl RegionRegistry {
    pub fn new(config: RegistryConfig, geom: PageGeometry) -> Result<Self> {
        if config.op_capacity == 0 || config.page_capacity == 0 {
            return Err(Error::InvalidConfig("registry capacities must be positive".into()));
        }
        let slots: Box<[OpSlot]> = (0..config.op_capacity).map(|_| OpSlot::new()).collect();
        Ok(RegionRegistry {
            geom,
            slots,
            pages: PageTable::new(config.page_capacity),
            high_water: AtomicUsize::new(0),
            next_seq: AtomicU64::new(1),
            write: SpinLock(AtomicBool::new(false)),
            index: Mutex::new(Index {
                by_id: HashMap::new(),
                // Popped from the back: lowest slots are used first.
                free: (0..config.op_capacity).rev().collect(),
            }),
        })
    }

    pub fn geometry(&self) -> PageGeometry {
        self.geom
    }

    pub fn op_capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn reserve(&self) -> Result<Reservation<'_>> {
        let i = self
            .index
            .lock()
            .unwrap()
            .free
            .pop()
            .ok_or(Error::CapacityExhausted { what: "op slots" })?;
        self.slots[i].state.store(RESERVED, Ordering::SeqCst);
        self.high_water.fetch_max(i + 1, Ordering::AcqRel);
        Ok(Reservation {
            registry: self,
            slot: Some(i),
        })
    }

    /// Registers `op` without touching page protection.
    pub fn register(&self, op: GuardedOp) -> Result<OpId> {
        let r = self.reserve()?;
        self.commit(r, op, &NoProtection)
    }

    /// Publishes `op` in a reserved slot, then protects its range.
    ///
    /// The op is visible to [`lookup`](Self::lookup) before any page turns
    /// read-only, so every fault on those pages finds an owner. On protector
    /// failure the registration is rolled back and the error returned.
    pub fn commit(&self, mut reservation: Reservation<'_>, op: GuardedOp, protector: &dyn Protector) -> Result<OpId> {
        if !op.range.contains_buffer(&op.buffer) || !op.range.start().is_multiple_of(self.geom.page_size()) || !op.range.len().is_multiple_of(self.geom.page_size()) {
            return Err(Error::InvalidBuffer("op range must be page aligned and cover its buffer"));
        }
        let i = reservation.slot.expect("reservation holds a slot");
        {
            let mut index = self.index.lock().unwrap();
            if index.by_id.contains_key(&op.id) {
                return Err(Error::DuplicateId(op.id));
            }
            index.by_id.insert(op.id, i);
        }
        let slot = &self.slots[i];
        slot.id.store(op.id.0, Ordering::Relaxed);
        slot.range_start.store(op.range.start(), Ordering::Relaxed);
        slot.range_len.store(op.range.len(), Ordering::Relaxed);
        slot.buf_start.store(op.buffer.start(), Ordering::Relaxed);
        slot.buf_len.store(op.buffer.len(), Ordering::Relaxed);
        slot.counters.store(
            op.counters.map_or(std::ptr::null_mut(), |c| c as *const _ as *mut _),
            Ordering::Relaxed,
        );
        slot.unprotected_in_fault.store(false, Ordering::Relaxed);
        slot.seq.store(self.next_seq.fetch_add(1, Ordering::Relaxed), Ordering::Relaxed);
        // SAFETY: slot is RESERVED, so no reader can pin it.
        unsafe { *slot.handle.get() = Some(op.handle) };

        let pages = op.range.pages(self.geom);
        let guard = self.write.lock();
        if self.pages.len.load(Ordering::Relaxed) + self.pages.missing_pages(pages.clone()) > self.pages.capacity {
            drop(guard);
            self.unpublish(i, op.id);
            reservation.slot = Some(i);
            return Err(Error::CapacityExhausted { what: "pages" });
        }
        self.pages.begin_write();
        for p in pages.clone() {
            self.pages.increment(p);
        }
        self.pages.end_write();
        slot.state.store(LIVE, Ordering::SeqCst);
        reservation.slot = None;

        if let Err(e) = protector.protect(op.range) {
            slot.state.store(RETIRING, Ordering::SeqCst);
            self.pages.begin_write();
            let freed: usize = pages.clone().filter(|&p| self.pages.decrement(p)).count();
            self.pages.end_write();
            if freed > 0 {
                // Pages only this op covered may be partially protected. The
                // range may contain a hole, so an error here is expected and
                // the mapped part is restored regardless.
                let _ = self.unprotect_runs(pages.filter(|&p| self.pages.find(p).is_none()), protector);
            }
            drop(guard);
            slot.wait_unpinned();
            self.unpublish(i, op.id);
            self.index.lock().unwrap().free.push(i);
            return Err(e);
        }
        drop(guard);
        Ok(op.id)
    }

    fn unpublish(&self, i: usize, id: OpId) {
        let slot = &self.slots[i];
        // SAFETY: slot not LIVE and unpinned.
        unsafe { *slot.handle.get() = None };
        slot.state.store(RESERVED, Ordering::SeqCst);
        self.index.lock().unwrap().by_id.remove(&id);
        slot.state.store(FREE, Ordering::SeqCst);
    }

    /// Fault-context-safe: the earliest-registered in-flight op whose range
    /// contains `addr`.
    pub fn lookup(&self, addr: usize) -> Option<OpRef<'_>> {
        if self.pages.count(self.geom.page_of(addr)) == 0 {
            return None;
        }
        let mut best: Option<OpRef<'_>> = None;
        for slot in &self.slots[..self.high_water.load(Ordering::Acquire)] {
            if slot.state.load(Ordering::Relaxed) != LIVE {
                continue;
            }
            let Some(op) = slot.pin() else { continue };
            if !op.range_contains(addr) || op.is_complete() {
                continue;
            }
            if best.as_ref().is_none_or(|b| op.registration_seq() < b.registration_seq()) {
                best = Some(op);
            }
        }
        best
    }

    /// Fault-context-safe census of the live ops on `addr`'s page.
    pub fn owners(&self, addr: usize) -> PageOwners {
        let mut out = PageOwners::default();
        if self.pages.count(self.geom.page_of(addr)) == 0 {
            return out;
        }
        let page = PageRange::page_containing(addr, self.geom);
        for slot in &self.slots[..self.high_water.load(Ordering::Acquire)] {
            if slot.state.load(Ordering::Relaxed) != LIVE {
                continue;
            }
            let Some(op) = slot.pin() else { continue };
            if !op.range_contains(page.start()) {
                continue;
            }
            out.live += 1;
            if !op.is_complete() {
                out.in_flight += 1;
            }
            out.addr_in_buffer |= op.buffer_contains(addr);
            if out.counters.is_none() {
                out.counters = op.counters();
            }
        }
        out
    }

    /// Fault-context-safe. If the page holding `addr` is registered but no
    /// op on it is in flight, makes the page writable and returns true.
    pub fn unprotect_if_idle(&self, addr: usize, protector: &dyn Protector) -> bool {
        let _guard = self.write.lock();
        let page = PageRange::page_containing(addr, self.geom);
        if self.pages.count(self.geom.page_of(addr)) == 0 || self.lookup(addr).is_some() {
            return false;
        }
        if protector.unprotect(page).is_err() {
            return false;
        }
        for slot in &self.slots[..self.high_water.load(Ordering::Acquire)] {
            if let Some(op) = slot.pin() {
                if op.range_contains(page.start()) {
                    slot.unprotected_in_fault.store(true, Ordering::Relaxed);
                }
            }
        }
        true
    }

    pub fn refcount(&self, page: usize) -> u32 {
        self.pages.count(page)
    }

    /// Distinct pages currently guarded.
    pub fn guarded_pages(&self) -> usize {
        self.pages.len.load(Ordering::Relaxed)
    }

    pub fn live_ops(&self) -> usize {
        self.index.lock().unwrap().by_id.len()
    }

    /// `None` when the id is not registered (never was, or already released).
    pub fn state(&self, id: OpId) -> Option<OpState> {
        let i = *self.index.lock().unwrap().by_id.get(&id)?;
        self.slots[i].pin().map(|op| op.state())
    }

    pub fn release(&self, id: OpId) -> Result<Released> {
        self.release_with(id, &NoProtection)
    }

    /// Drops a completed op. Pages whose count reaches zero are handed to
    /// `protector.unprotect` (coalesced into runs) and returned.
    pub fn release_with(&self, id: OpId, protector: &dyn Protector) -> Result<Released> {
        let mut index = self.index.lock().unwrap();
        let &i = index.by_id.get(&id).ok_or(Error::UnknownOp(id))?;
        let slot = &self.slots[i];
        let (range, complete) = {
            let op = slot.pin().ok_or(Error::UnknownOp(id))?;
            (op.range(), op.is_complete())
        };
        if !complete {
            return Err(Error::StillInFlight(id));
        }
        let pages = range.pages(self.geom);
        let mut freed = Vec::with_capacity(pages.len());

        let guard = self.write.lock();
        slot.state.store(RETIRING, Ordering::SeqCst);
        self.pages.begin_write();
        for p in pages {
            if self.pages.decrement(p) {
                freed.push(p);
            }
        }
        self.pages.end_write();
        let unprotect_result = self.unprotect_runs(freed.iter().copied(), protector);
        drop(guard);

        slot.wait_unpinned();
        // SAFETY: RETIRING and unpinned.
        let handle = unsafe { (*slot.handle.get()).take() };
        slot.state.store(FREE, Ordering::SeqCst);
        index.by_id.remove(&id);
        index.free.push(i);
        drop(index);
        drop(handle);
        unprotect_result?;
        Ok(Released { id, freed_pages: freed })
    }

    // Must hold the write lock. No allocation.
    fn unprotect_runs(&self, pages: impl Iterator<Item = usize>, protector: &dyn Protector) -> Result<()> {
        let ps = self.geom.page_size();
        let mut run: Option<(usize, usize)> = None;
        let mut result = Ok(());
        let mut flush = |start: usize, n: usize| {
            let r = PageRange::new(start * ps, n * ps, self.geom).expect("whole pages");
            if let Err(e) = protector.unprotect(r) {
                result = Err(e);
            }
        };
        for p in pages {
            run = match run {
                Some((start, n)) if start + n == p => Some((start, n + 1)),
                Some((start, n)) => {
                    flush(start, n);
                    Some((p, 1))
                }
                None => Some((p, 1)),
            };
        }
        if let Some((start, n)) = run {
            flush(start, n);
        }
        result
    }
}
