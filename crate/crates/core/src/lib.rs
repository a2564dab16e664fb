//! Zero-copy non-blocking sends made safe by write-protecting the source
//! buffer while the transfer is in flight.
//!
//! A protected send registers the buffer's pages, marks them read-only and
//! hands the buffer to the transport without copying. A thread that writes
//! to those pages before the transport is done faults; the fault handler
//! finds the owning send, waits for it to complete, unprotects the pages and
//! lets the write retry. Faults at addresses the library does not own keep
//! their usual fatal behaviour.

pub mod checksum;
pub mod demo;
pub mod error;
pub mod facade;
pub mod guard;
pub mod pagebuf;
pub mod region;
pub mod registry;
pub mod stats;
pub mod sweep;
pub mod transport;

pub use checksum::{fnv1a64, ChecksumKind, Fnv1a};
pub use error::{Error, Result};
pub use facade::{GuardOptions, ModeOverride, PageGuard, SendPath, SendPolicy, SendToken};
pub use guard::{align_to_pages, protect_read_only, unprotect, FaultEvent, FaultKind, GuardConfig, MemoryGuard, Mprotect};
pub use pagebuf::PageBuf;
pub use region::{BufferDesc, PageGeometry, PageRange};
pub use registry::{GuardedOp, OpId, OpState, RegionRegistry, RegistryConfig};
pub use stats::{GuardCounters, GuardStats};
pub use transport::{
    CompletionHandle, CorruptionReport, DmaConfig, Rank, RecvStatus, SimComm, SimWorld, Source, Tag, TcpComm, TcpWorld,
    Transport,
};
