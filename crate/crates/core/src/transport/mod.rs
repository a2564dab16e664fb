//! Non-blocking message transports.
//!
//! A [`Transport`] is one rank's view of a message-passing world. Sends are
//! zero-copy: [`Transport::isend`] records the caller's buffer and returns a
//! [`CompletionHandle`] immediately, and a progress agent owned by the
//! transport reads the buffer later. The agent publishes completion on the
//! handle without any help from the caller, so a thread parked waiting on a
//! handle (for example inside the protection-fault handler) always wakes up.
//!
//! Two engines are provided: [`sim`] models a slow DMA device inside one
//! process, [`tcp`] carries the same traffic over loopback sockets.

pub mod frame;
mod mailbox;
pub mod sim;
pub mod tcp;

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checksum::ChecksumKind;
use crate::error::{Error, Result};

pub(crate) use mailbox::Mailbox;
pub use sim::{SimComm, SimWorld};
pub use tcp::{TcpComm, TcpWorld};

/// Identifies a peer in a world of `world_size` ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Rank(pub u32);

impl Rank {
    pub const fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rank {}", self.0)
    }
}

/// Source filter for probe/recv: a specific rank or the `ANY` sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Source(u32);

impl Source {
    pub const ANY: Source = Source(u32::MAX);

    pub const fn rank(r: Rank) -> Self {
        Source(r.0)
    }

    pub const fn is_any(self) -> bool {
        self.0 == u32::MAX
    }

    pub fn matches(self, r: Rank) -> bool {
        self.is_any() || self.0 == r.0
    }
}

impl From<Rank> for Source {
    fn from(r: Rank) -> Self {
        Source::rank(r)
    }
}

/// Message class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag(pub u32);

/// Pacing of the simulated device: `chunk_size` bytes become readable every
/// `step_delay`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DmaConfig {
    pub chunk_size: usize,
    pub step_delay: Duration,
    pub checksum: ChecksumKind,
}

impl DmaConfig {
    pub const DEFAULT_CHUNK: usize = 4096;
    pub const DEFAULT_DELAY: Duration = Duration::from_micros(100);

    pub fn new(chunk_size: usize, step_delay: Duration) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::InvalidConfig("DMA chunk size must be at least 1".into()));
        }
        Ok(DmaConfig {
            chunk_size,
            step_delay,
            checksum: ChecksumKind::default(),
        })
    }

    pub fn with_checksum(mut self, checksum: ChecksumKind) -> Self {
        self.checksum = checksum;
        self
    }

    /// No pacing: transfers finish as soon as the agent gets to them.
    pub fn instant() -> Self {
        DmaConfig {
            chunk_size: Self::DEFAULT_CHUNK,
            step_delay: Duration::ZERO,
            checksum: ChecksumKind::default(),
        }
    }

    /// Time to read `len` bytes at this pacing.
    pub fn transfer_time(&self, len: usize) -> Duration {
        if self.step_delay.is_zero() || len == 0 {
            return Duration::ZERO;
        }
        let nanos = self.step_delay.as_nanos() * len as u128 / self.chunk_size as u128;
        Duration::from_nanos(nanos.min(u64::MAX as u128) as u64)
    }

    /// Bytes the device may have read `elapsed` after starting a transfer of
    /// `len` bytes.
    pub fn readable_after(&self, elapsed: Duration, len: usize) -> usize {
        if self.step_delay.is_zero() {
            return len;
        }
        let n = elapsed.as_nanos() * self.chunk_size as u128 / self.step_delay.as_nanos();
        n.min(len as u128) as usize
    }
}

impl Default for DmaConfig {
    fn default() -> Self {
        DmaConfig {
            chunk_size: Self::DEFAULT_CHUNK,
            step_delay: Self::DEFAULT_DELAY,
            checksum: ChecksumKind::default(),
        }
    }
}

/// Compares what the caller's buffer held when the send was posted with the
/// bytes the transport actually read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub op: u64,
    pub snapshot_checksum: u64,
    pub observed_checksum: u64,
    pub corrupted: bool,
}

/// What [`Transport::recv`] delivered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecvStatus {
    pub source: Rank,
    pub tag: Tag,
    pub len: usize,
}

/// Process-unique identity of a transport instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransportId(u64);

impl TransportId {
    /// Owner of handles created outside any transport (tests, custom engines
    /// that do not care about stale-handle detection).
    pub const DETACHED: TransportId = TransportId(0);

    pub fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        TransportId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// Nanoseconds since a process-wide reference instant.
pub(crate) fn now_ns() -> u64 {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

struct HandleState {
    id: u64,
    owner: TransportId,
    len: usize,
    snapshot: u64,
    completed: AtomicBool,
    bytes_sent: AtomicUsize,
    observed: AtomicU64,
    last_read_ns: AtomicU64,
    completed_ns: AtomicU64,
}

/// Completion state of one posted send.
///
/// `is_complete` is a single atomic load and may be called from a signal
/// handler. Completion is published with release ordering after the last
/// read of the source buffer, so an acquire load that sees `true` also sees
/// the transport done with the buffer.
#[derive(Clone)]
pub struct CompletionHandle(Arc<HandleState>);

impl CompletionHandle {
    /// Creates a handle for a send of `len` bytes whose source held
    /// `snapshot_checksum` at posting time.
    pub fn new(owner: TransportId, len: usize, snapshot_checksum: u64) -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        CompletionHandle(Arc::new(HandleState {
            id: NEXT.fetch_add(1, Ordering::Relaxed),
            owner,
            len,
            snapshot: snapshot_checksum,
            completed: AtomicBool::new(false),
            bytes_sent: AtomicUsize::new(0),
            observed: AtomicU64::new(0),
            last_read_ns: AtomicU64::new(0),
            completed_ns: AtomicU64::new(0),
        }))
    }

    /// Handle not tied to any transport; completes when [`complete`] is called.
    ///
    /// [`complete`]: CompletionHandle::complete
    pub fn detached(len: usize) -> Self {
        Self::new(TransportId::DETACHED, len, 0)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn owner(&self) -> TransportId {
        self.0.owner
    }

    pub fn len(&self) -> usize {
        self.0.len
    }

    pub fn is_empty(&self) -> bool {
        self.0.len == 0
    }

    #[inline]
    pub fn is_complete(&self) -> bool {
        self.0.completed.load(Ordering::Acquire)
    }

    pub fn bytes_sent(&self) -> usize {
        self.0.bytes_sent.load(Ordering::Acquire)
    }

    /// Progress agent: `n` more bytes were read from the source buffer.
    pub fn record_read(&self, n: usize) {
        self.0.last_read_ns.store(now_ns(), Ordering::Relaxed);
        self.0.bytes_sent.fetch_add(n, Ordering::AcqRel);
    }

    /// Progress agent: the transfer is over and `observed_checksum` covers
    /// the bytes read. Only the first call has an effect.
    pub fn complete(&self, observed_checksum: u64) {
        self.0.observed.store(observed_checksum, Ordering::Relaxed);
        self.0.completed_ns.store(now_ns(), Ordering::Relaxed);
        self.0.completed.store(true, Ordering::Release);
    }

    /// (last source read, completion) in nanoseconds on the process clock.
    pub fn audit_times(&self) -> Option<(u64, u64)> {
        self.is_complete().then(|| {
            (
                self.0.last_read_ns.load(Ordering::Relaxed),
                self.0.completed_ns.load(Ordering::Relaxed),
            )
        })
    }

    pub fn corruption_report(&self) -> Result<CorruptionReport> {
        if !self.is_complete() {
            return Err(Error::Incomplete);
        }
        let observed = self.0.observed.load(Ordering::Relaxed);
        Ok(CorruptionReport {
            op: self.0.id,
            snapshot_checksum: self.0.snapshot,
            observed_checksum: observed,
            corrupted: observed != self.0.snapshot,
        })
    }

    /// Spins (yielding) until complete.
    pub fn wait(&self) {
        let mut spins = 0u32;
        while !self.is_complete() {
            if spins < 64 {
                std::hint::spin_loop();
                spins += 1;
            } else {
                std::thread::yield_now();
            }
        }
    }

    /// Like [`wait`](Self::wait) but gives up after `timeout`.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while !self.is_complete() {
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::yield_now();
        }
        true
    }
}

impl fmt::Debug for CompletionHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompletionHandle")
            .field("id", &self.0.id)
            .field("len", &self.0.len)
            .field("bytes_sent", &self.bytes_sent())
            .field("completed", &self.is_complete())
            .finish()
    }
}

/// Checksum of the source buffer at posting time.
///
/// # Safety
/// `buf` must be valid for reads.
pub(crate) unsafe fn snapshot(buf: *const [u8], kind: ChecksumKind) -> u64 {
    if buf.len() == 0 {
        return kind.of(&[]);
    }
    kind.of(std::slice::from_raw_parts(buf as *const u8, buf.len()))
}

/// One rank's endpoint in a message-passing world.
pub trait Transport: Send + Sync {
    fn rank(&self) -> Rank;

    fn world_size(&self) -> usize;

    /// Posts a send of `buf` to `dst` and returns without waiting.
    ///
    /// # Safety
    /// `buf` must stay mapped and readable until the returned handle reports
    /// completion. Bytes written to it before then may or may not be sent.
    unsafe fn isend(&self, dst: Rank, tag: Tag, buf: *const [u8]) -> Result<CompletionHandle>;

    /// Non-blocking completion check.
    fn test(&self, handle: &CompletionHandle) -> Result<bool>;

    /// True iff a message matching `(src, tag)` can be received right now.
    fn probe(&self, src: Source, tag: Tag) -> bool;

    /// Copies the oldest matching message into `out`, blocking until one
    /// arrives. A too-small `out` is an error and leaves the message queued.
    fn recv(&self, src: Source, tag: Tag, out: &mut [u8]) -> Result<RecvStatus>;

    /// Blocks until any message is queued for this rank or `timeout` passes.
    fn wait_incoming(&self, timeout: Duration) -> bool;

    /// Checksum comparison for a completed send.
    fn corruption_report(&self, handle: &CompletionHandle) -> Result<CorruptionReport> {
        self.test(handle)?;
        handle.corruption_report()
    }

    /// Safe send of an owned payload. The transport keeps `payload` alive
    /// until completion.
    fn send_owned(&self, dst: Rank, tag: Tag, payload: Vec<u8>) -> Result<CompletionHandle>;
}

pub(crate) fn check_dst(dst: Rank, world_size: usize) -> Result<()> {
    if dst.index() >= world_size {
        return Err(Error::UnknownDestination {
            rank: dst.0,
            world_size,
        });
    }
    Ok(())
}

pub(crate) fn check_owner(owner: TransportId, handle: &CompletionHandle) -> Result<()> {
    if handle.owner() != owner {
        return Err(Error::StaleHandle);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pacing_math() {
        let cfg = DmaConfig::new(4096, Duration::from_millis(1)).unwrap();
        assert_eq!(cfg.transfer_time(16 * 1024), Duration::from_millis(4));
        assert_eq!(cfg.readable_after(Duration::from_micros(500), 16 * 1024), 2048);
        assert_eq!(cfg.readable_after(Duration::from_secs(1), 100), 100);
        assert_eq!(DmaConfig::instant().readable_after(Duration::ZERO, 10), 10);
        assert!(DmaConfig::new(0, Duration::ZERO).is_err());
    }

    #[test]
    fn handle_lifecycle() {
        let h = CompletionHandle::new(TransportId::DETACHED, 8, 42);
        assert!(!h.is_complete());
        assert!(matches!(h.corruption_report(), Err(Error::Incomplete)));
        h.record_read(8);
        h.complete(42);
        assert!(h.is_complete());
        let r = h.corruption_report().unwrap();
        assert!(!r.corrupted);
        let (last, done) = h.audit_times().unwrap();
        assert!(last <= done);
    }

    #[test]
    fn source_matching() {
        assert!(Source::ANY.matches(Rank(3)));
        assert!(Source::rank(Rank(3)).matches(Rank(3)));
        assert!(!Source::rank(Rank(2)).matches(Rank(3)));
    }
}
