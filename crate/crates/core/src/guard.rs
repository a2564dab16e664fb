//! Hardware write protection and the fault handler that turns a write to an
//! in-flight buffer into a wait.
//!
//! Everything that touches the OS lives here: `mprotect`, `sigaction` and
//! the handler itself. The handler resolves the faulting address through the
//! process-wide [`RegionRegistry`], spins on the owning op's completion flag
//! (set by the transport's progress agent, never by polling the transport),
//! makes the page writable again once nothing in flight covers it, and
//! returns so the write is retried. Faults the registry knows nothing about
//! are handed to whatever handler was installed before, or to the default
//! action, so real bugs still crash.

use std::cell::{Cell, UnsafeCell};
use std::io;
use std::mem::MaybeUninit;
use std::sync::atomic::{AtomicPtr, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::region::{PageGeometry, PageRange};
use crate::registry::{OpRef, Protector, RegionRegistry, RegistryConfig};

pub use crate::region::align_to_pages;

#[derive(Debug, Clone, Copy)]
pub struct GuardConfig {
    pub registry: RegistryConfig,
    /// Busy-spin iterations before the handler starts yielding.
    pub spin_iterations: u32,
    /// Abort the process if a writer waits longer than this.
    pub watchdog: Option<Duration>,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            registry: RegistryConfig::default(),
            spin_iterations: 64,
            watchdog: None,
        }
    }
}

/// Marks `range` read-only. Reads keep working; writes fault.
pub fn protect_read_only(range: PageRange) -> Result<()> {
    mprotect(range, libc::PROT_READ).map_err(Error::Protect)
}

/// Makes `range` writable again. Idempotent.
pub fn unprotect(range: PageRange) -> Result<()> {
    mprotect(range, libc::PROT_READ | libc::PROT_WRITE).map_err(Error::Protect)
}

fn mprotect(range: PageRange, prot: libc::c_int) -> io::Result<()> {
    // SAFETY: mprotect validates the range itself and reports unmapped
    // pages as ENOMEM; it never touches memory contents.
    let rc = unsafe { libc::mprotect(range.start() as *mut libc::c_void, range.len(), prot) };
    if rc == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

/// [`Protector`] backed by `mprotect`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Mprotect;

impl Protector for Mprotect {
    fn protect(&self, range: PageRange) -> Result<()> {
        protect_read_only(range)
    }

    fn unprotect(&self, range: PageRange) -> Result<()> {
        unprotect(range)
    }
}

/// Kind of a fault seen by the handler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// The page belonged to a registered op.
    GuardedWrite,
    Unrelated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultEvent {
    pub addr: usize,
    pub kind: FaultKind,
    /// The write landed inside no registered buffer (page-sharing victim).
    pub false_positive: bool,
    pub wait_time: Duration,
}

const LOG_LEN: usize = 256;

// Fixed ring of recent guarded faults, written from the handler.
struct FaultLog {
    next: AtomicUsize,
    addr: [AtomicUsize; LOG_LEN],
    wait_ns: [AtomicU64; LOG_LEN],
    flags: [AtomicU32; LOG_LEN],
}

impl FaultLog {
    const fn new() -> Self {
        FaultLog {
            next: AtomicUsize::new(0),
            addr: [const { AtomicUsize::new(0) }; LOG_LEN],
            wait_ns: [const { AtomicU64::new(0) }; LOG_LEN],
            flags: [const { AtomicU32::new(0) }; LOG_LEN],
        }
    }

    fn push(&self, addr: usize, kind: FaultKind, false_positive: bool, wait: Duration) {
        let i = self.next.fetch_add(1, Ordering::AcqRel) % LOG_LEN;
        self.addr[i].store(addr, Ordering::Relaxed);
        self.wait_ns[i].store(wait.as_nanos() as u64, Ordering::Relaxed);
        let flags = 1 | u32::from(kind == FaultKind::GuardedWrite) << 1 | u32::from(false_positive) << 2;
        self.flags[i].store(flags, Ordering::Release);
    }
}

/// Process-wide protection state: the registry the fault handler consults.
pub struct MemoryGuard {
    registry: RegionRegistry,
    log: FaultLog,
    guarded_faults: AtomicU64,
    unrelated_faults: AtomicU64,
}

static GUARD: AtomicPtr<MemoryGuard> = AtomicPtr::new(std::ptr::null_mut());
static SPIN_ITERATIONS: AtomicU32 = AtomicU32::new(64);
static WATCHDOG_NS: AtomicU64 = AtomicU64::new(0);

impl MemoryGuard {
    /// Creates the process-wide guard and installs the fault handler on first
    /// call. Later calls return the existing guard; their registry
    /// capacities are ignored, spin and watchdog settings are applied.
    pub fn install(config: GuardConfig) -> Result<&'static MemoryGuard> {
        static INIT: Mutex<()> = Mutex::new(());
        let _init = INIT.lock().unwrap();
        SPIN_ITERATIONS.store(config.spin_iterations, Ordering::Relaxed);
        set_watchdog(config.watchdog);
        if let Some(g) = Self::global() {
            return Ok(g);
        }
        let registry = RegionRegistry::new(config.registry, PageGeometry::host())?;
        let guard: &'static MemoryGuard = Box::leak(Box::new(MemoryGuard {
            registry,
            log: FaultLog::new(),
            guarded_faults: AtomicU64::new(0),
            unrelated_faults: AtomicU64::new(0),
        }));
        GUARD.store(guard as *const _ as *mut _, Ordering::Release);
        if let Err(e) = install_fault_handler() {
            GUARD.store(std::ptr::null_mut(), Ordering::Release);
            return Err(e);
        }
        Ok(guard)
    }

    /// Guard with default settings, installed on first use.
    pub fn get() -> Result<&'static MemoryGuard> {
        match Self::global() {
            Some(g) => Ok(g),
            None => Self::install(GuardConfig::default()),
        }
    }

    pub fn global() -> Option<&'static MemoryGuard> {
        // SAFETY: only leaked, never-freed guards are stored.
        unsafe { GUARD.load(Ordering::Acquire).as_ref() }
    }

    pub fn registry(&self) -> &RegionRegistry {
        &self.registry
    }

    pub fn geometry(&self) -> PageGeometry {
        self.registry.geometry()
    }

    /// Faults resolved against the registry since installation.
    pub fn guarded_faults(&self) -> u64 {
        self.guarded_faults.load(Ordering::Relaxed)
    }

    /// Faults passed on to the previous handler (each unknown address is
    /// retried once before being passed on).
    pub fn unrelated_faults(&self) -> u64 {
        self.unrelated_faults.load(Ordering::Relaxed)
    }

    /// Most recent guarded faults, oldest first (at most 256).
    pub fn recent_faults(&self) -> Vec<FaultEvent> {
        let end = self.log.next.load(Ordering::Acquire);
        let start = end.saturating_sub(LOG_LEN);
        (start..end)
            .filter_map(|n| {
                let i = n % LOG_LEN;
                let flags = self.log.flags[i].load(Ordering::Acquire);
                (flags & 1 == 1).then(|| FaultEvent {
                    addr: self.log.addr[i].load(Ordering::Relaxed),
                    kind: if flags & 2 != 0 {
                        FaultKind::GuardedWrite
                    } else {
                        FaultKind::Unrelated
                    },
                    false_positive: flags & 4 != 0,
                    wait_time: Duration::from_nanos(self.log.wait_ns[i].load(Ordering::Relaxed)),
                })
            })
            .collect()
    }
}

pub fn set_watchdog(limit: Option<Duration>) {
    WATCHDOG_NS.store(limit.map_or(0, |d| d.as_nanos().max(1) as u64), Ordering::Relaxed);
}

pub fn set_spin_iterations(n: u32) {
    SPIN_ITERATIONS.store(n, Ordering::Relaxed);
}

// --- signal plumbing ------------------------------------------------------

#[cfg(target_os = "macos")]
const FAULT_SIGNALS: [libc::c_int; 2] = [libc::SIGSEGV, libc::SIGBUS];
#[cfg(not(target_os = "macos"))]
const FAULT_SIGNALS: [libc::c_int; 1] = [libc::SIGSEGV];

// Same value on Linux and the BSDs; the libc crate does not export it there.
const SEGV_ACCERR: libc::c_int = 2;

struct PrevActions(UnsafeCell<[MaybeUninit<libc::sigaction>; FAULT_SIGNALS.len()]>);

// SAFETY: written once under the install lock before the handler can run,
// read-only afterwards.
unsafe impl Sync for PrevActions {}

static PREV: PrevActions = PrevActions(UnsafeCell::new([const { MaybeUninit::uninit() }; FAULT_SIGNALS.len()]));

thread_local! {
    // Last address this thread faulted on without a registry match.
    static LAST_MISS: Cell<usize> = const { Cell::new(0) };
}

fn install_fault_handler() -> Result<()> {
    static INSTALLED: OnceLock<()> = OnceLock::new();
    if INSTALLED.get().is_some() {
        return Ok(());
    }
    for (i, &sig) in FAULT_SIGNALS.iter().enumerate() {
        // SAFETY: plain C structs; the handler has the SA_SIGINFO signature.
        unsafe {
            let mut action: libc::sigaction = std::mem::zeroed();
            action.sa_sigaction = on_fault as *const () as usize;
            action.sa_flags = libc::SA_SIGINFO | libc::SA_ONSTACK;
            libc::sigemptyset(&mut action.sa_mask);
            let prev = (*PREV.0.get())[i].as_mut_ptr();
            if libc::sigaction(sig, &action, prev) != 0 {
                return Err(Error::Install(io::Error::last_os_error()));
            }
        }
    }
    let _ = INSTALLED.set(());
    Ok(())
}

extern "C" fn on_fault(sig: libc::c_int, info: *mut libc::siginfo_t, ctx: *mut libc::c_void) {
    // SAFETY: the kernel passes a valid siginfo for SA_SIGINFO handlers.
    let (addr, code) = unsafe { ((*info).si_addr() as usize, (*info).si_code) };
    // Only permission faults can be ours. A fault on unmapped memory inside
    // a registered range (a buffer freed mid-send) must crash, not wait.
    let permission = sig != libc::SIGSEGV || code == SEGV_ACCERR;
    if let Some(guard) = MemoryGuard::global().filter(|_| permission) {
        if resolve(guard, addr) {
            LAST_MISS.set(0);
            return;
        }
        // The owning op may have been released and its page unprotected
        // between the fault and the lookup: retry once before giving up.
        if LAST_MISS.replace(addr) != addr {
            return;
        }
        LAST_MISS.set(0);
        guard.unrelated_faults.fetch_add(1, Ordering::Relaxed);
    }
    // SAFETY: forwarding the kernel-provided arguments.
    unsafe { chain(sig, info, ctx) };
}

/// Handles a fault on a registered page; false if the page is not ours.
fn resolve(guard: &MemoryGuard, addr: usize) -> bool {
    let reg = &guard.registry;
    let owners = reg.owners(addr);
    if owners.live == 0 {
        return false;
    }
    let started = Instant::now();
    while let Some(op) = reg.lookup(addr) {
        wait_for(&op, started);
    }
    let unprotected = reg.unprotect_if_idle(addr, &Mprotect);
    let waited = started.elapsed();
    let false_positive = !owners.addr_in_buffer;
    if let Some(c) = owners.counters {
        c.fault(false_positive, waited);
        if unprotected {
            c.unprotect(1);
        }
    }
    guard.guarded_faults.fetch_add(1, Ordering::Relaxed);
    guard.log.push(addr, FaultKind::GuardedWrite, false_positive, waited);
    true
}

fn wait_for(op: &OpRef<'_>, started: Instant) {
    let spin = SPIN_ITERATIONS.load(Ordering::Relaxed);
    let mut n = 0u32;
    while !op.is_complete() {
        if n < spin {
            std::hint::spin_loop();
            n += 1;
            continue;
        }
        // SAFETY: async-signal-safe, no preconditions.
        unsafe { libc::sched_yield() };
        let limit = WATCHDOG_NS.load(Ordering::Relaxed);
        if limit != 0 && started.elapsed().as_nanos() as u64 > limit {
            watchdog_abort();
        }
    }
}

fn watchdog_abort() -> ! {
    const MSG: &[u8] = b"pageguard: writer blocked past watchdog limit on an in-flight send; aborting\n";
    // SAFETY: write(2) and abort(3) are async-signal-safe.
    unsafe {
        libc::write(2, MSG.as_ptr().cast(), MSG.len());
        libc::abort();
    }
}

unsafe fn chain(sig: libc::c_int, info: *mut libc::siginfo_t, ctx: *mut libc::c_void) {
    let Some(i) = FAULT_SIGNALS.iter().position(|&s| s == sig) else {
        return;
    };
    let prev = (*PREV.0.get())[i].assume_init_ref();
    let handler = prev.sa_sigaction;
    if handler == libc::SIG_DFL || handler == libc::SIG_IGN {
        // Restore the default action; returning re-executes the faulting
        // instruction, which now terminates the process.
        let mut dfl: libc::sigaction = std::mem::zeroed();
        dfl.sa_sigaction = libc::SIG_DFL;
        libc::sigemptyset(&mut dfl.sa_mask);
        libc::sigaction(sig, &dfl, std::ptr::null_mut());
        return;
    }
    if prev.sa_flags & libc::SA_SIGINFO != 0 {
        let f: extern "C" fn(libc::c_int, *mut libc::siginfo_t, *mut libc::c_void) = std::mem::transmute(handler);
        f(sig, info, ctx);
    } else {
        let f: extern "C" fn(libc::c_int) = std::mem::transmute(handler);
        f(sig);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pagebuf::PageBuf;

    #[test]
    fn protected_pages_stay_readable() {
        let mut buf = PageBuf::new(2 * 4096).unwrap();
        buf.as_mut_slice()[100] = 7;
        protect_read_only(buf.range()).unwrap();
        assert_eq!(unsafe { std::ptr::read_volatile(buf.as_ptr().add(100)) }, 7);
        unprotect(buf.range()).unwrap();
        unprotect(buf.range()).unwrap();
        buf.as_mut_slice()[100] = 8;
        assert_eq!(buf.as_slice()[100], 8);
    }

    #[test]
    fn protecting_unmapped_memory_fails() {
        // Below mmap_min_addr, so never mapped.
        let g = PageGeometry::host();
        let range = PageRange::new(g.page_size(), g.page_size(), g).unwrap();
        assert!(matches!(protect_read_only(range), Err(Error::Protect(_))));
    }
}
