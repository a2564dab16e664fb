//! `send_and_protect`: the user-facing send path.
//!
//! Small messages are copied into a staging buffer and sent from there, so
//! the caller's buffer is reusable immediately. Large messages are sent
//! zero-copy straight from the caller's buffer, whose pages are registered
//! and then made read-only until the send completes. A writer that touches
//! them in the meantime simply stalls inside the fault handler.
//!
//! Protected buffers should occupy pages the caller owns outright (see
//! [`PageBuf`](crate::PageBuf)). Sharing a page with unrelated data is legal
//! but makes writes to that data stall too; those stalls are counted as
//! `faults_false_positive`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::guard::{GuardConfig, MemoryGuard, Mprotect};
use crate::region::BufferDesc;
use crate::registry::{GuardedOp, OpId};
use crate::stats::{GuardCounters, GuardStats};
use crate::transport::{CompletionHandle, Rank, Tag, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeOverride {
    AlwaysCopy,
    AlwaysProtect,
}

/// Copy-or-protect decision by message size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendPolicy {
    /// Messages shorter than this are copied.
    pub threshold: usize,
    pub mode_override: Option<ModeOverride>,
}

impl SendPolicy {
    pub const DEFAULT_THRESHOLD: usize = 4096;

    pub fn with_threshold(threshold: usize) -> Self {
        SendPolicy {
            threshold,
            mode_override: None,
        }
    }

    pub fn always(mode: ModeOverride) -> Self {
        SendPolicy {
            threshold: Self::DEFAULT_THRESHOLD,
            mode_override: Some(mode),
        }
    }

    pub fn protects(&self, len: usize) -> bool {
        match self.mode_override {
            Some(ModeOverride::AlwaysCopy) => false,
            Some(ModeOverride::AlwaysProtect) => true,
            None => len >= self.threshold,
        }
    }
}

impl Default for SendPolicy {
    fn default() -> Self {
        Self::with_threshold(Self::DEFAULT_THRESHOLD)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GuardOptions {
    pub policy: SendPolicy,
    /// Most protected sends this sender keeps in flight; beyond it, copy.
    pub capacity: usize,
    /// Abort if a writer stalls this long (process-wide setting).
    pub watchdog: Option<Duration>,
    /// Send large messages zero-copy without any protection. Unsafe by
    /// design: exists to show what the guard prevents.
    pub disable: bool,
    /// Staging buffers kept for reuse.
    pub pool_buffers: usize,
}

impl Default for GuardOptions {
    fn default() -> Self {
        GuardOptions {
            policy: SendPolicy::default(),
            capacity: 4096,
            watchdog: None,
            disable: false,
            pool_buffers: 64,
        }
    }
}

/// Which path a send took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendPath {
    Copied,
    Protected,
    /// Zero-copy with the guard disabled.
    Unguarded,
    /// Protection failed after the transfer started; the call waited for
    /// completion before returning.
    Blocking,
}

#[derive(Debug, Clone)]
pub struct SendToken {
    pub path: SendPath,
    pub op: Option<OpId>,
    pub handle: CompletionHandle,
}

impl SendToken {
    pub fn is_complete(&self) -> bool {
        self.handle.is_complete()
    }
}

enum Pending {
    Protected { id: OpId, handle: CompletionHandle },
    Copied { handle: CompletionHandle, staging: Vec<u8> },
    Plain { handle: CompletionHandle },
}

impl Pending {
    fn handle(&self) -> &CompletionHandle {
        match self {
            Pending::Protected { handle, .. } | Pending::Copied { handle, .. } | Pending::Plain { handle } => handle,
        }
    }
}

/// Sends that have not been harvested by `check_for_completed`.
#[derive(Default)]
pub struct PendingSet {
    entries: Vec<Pending>,
}

impl PendingSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn protected_ids(&self) -> Vec<OpId> {
        self.entries
            .iter()
            .filter_map(|p| match p {
                Pending::Protected { id, .. } => Some(*id),
                _ => None,
            })
            .collect()
    }
}

struct StagingPool {
    free: Mutex<Vec<Vec<u8>>>,
    keep: usize,
    buf_size: usize,
}

impl StagingPool {
    fn take(&self, len: usize) -> Vec<u8> {
        if len <= self.buf_size {
            if let Some(mut v) = self.free.lock().unwrap().pop() {
                v.clear();
                return v;
            }
            return Vec::with_capacity(self.buf_size.max(len));
        }
        Vec::with_capacity(len)
    }

    fn give(&self, v: Vec<u8>) {
        if v.capacity() < self.buf_size || v.capacity() > self.buf_size.max(1) * 2 {
            return;
        }
        let mut free = self.free.lock().unwrap();
        if free.len() < self.keep {
            free.push(v);
        }
    }
}

/// A transport endpoint wrapped with copy-or-protect sends.
pub struct PageGuard<T: Transport> {
    transport: T,
    guard: &'static MemoryGuard,
    options: GuardOptions,
    counters: &'static GuardCounters,
    pending: Mutex<PendingSet>,
    pool: StagingPool,
    guarded_now: AtomicUsize,
}

impl<T: Transport> PageGuard<T> {
    /// Wraps `transport`, installing the process-wide fault handler with
    /// default registry capacities if it is not installed yet.
    pub fn new(transport: T, options: GuardOptions) -> Result<Self> {
        let guard = MemoryGuard::install(GuardConfig {
            watchdog: options.watchdog,
            ..GuardConfig::default()
        })?;
        Ok(Self::with_guard(transport, options, guard))
    }

    pub fn with_guard(transport: T, options: GuardOptions, guard: &'static MemoryGuard) -> Self {
        PageGuard {
            transport,
            guard,
            options,
            counters: GuardCounters::leak(),
            pending: Mutex::default(),
            pool: StagingPool {
                free: Mutex::default(),
                keep: options.pool_buffers,
                buf_size: options.policy.threshold.max(64),
            },
            guarded_now: AtomicUsize::new(0),
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn options(&self) -> &GuardOptions {
        &self.options
    }

    pub fn guard(&self) -> &'static MemoryGuard {
        self.guard
    }

    /// Sends `buffer` under this sender's policy.
    ///
    /// # Safety
    /// `buffer` must stay mapped until the returned token completes. Writes
    /// to it are safe at any time: they either happen before the copy, or
    /// stall until the transfer is over. Writes through syscalls (e.g.
    /// `read(2)` into the buffer) do not fault and must be avoided while a
    /// send is in flight.
    pub unsafe fn send_and_protect(&self, dst: Rank, tag: Tag, buffer: BufferDesc) -> Result<SendToken> {
        self.send_with_policy(dst, tag, buffer, &self.options.policy)
    }

    /// As [`send_and_protect`](Self::send_and_protect) with an explicit policy.
    ///
    /// # Safety
    /// Same contract as `send_and_protect`.
    pub unsafe fn send_with_policy(&self, dst: Rank, tag: Tag, buffer: BufferDesc, policy: &SendPolicy) -> Result<SendToken> {
        if !policy.protects(buffer.len()) {
            return self.send_copy(dst, tag, buffer);
        }
        if self.options.disable {
            let handle = self.transport.isend(dst, tag, buffer.as_raw())?;
            self.push(Pending::Plain { handle: handle.clone() });
            return Ok(SendToken {
                path: SendPath::Unguarded,
                op: None,
                handle,
            });
        }

        let registry = self.guard.registry();
        if self.guarded_now.fetch_add(1, Ordering::AcqRel) >= self.options.capacity {
            self.guarded_now.fetch_sub(1, Ordering::AcqRel);
            self.counters.fallback();
            return self.send_copy(dst, tag, buffer);
        }
        let reservation = match registry.reserve() {
            Ok(r) => r,
            Err(_) => {
                self.guarded_now.fetch_sub(1, Ordering::AcqRel);
                self.counters.fallback();
                return self.send_copy(dst, tag, buffer);
            }
        };
        let handle = match self.transport.isend(dst, tag, buffer.as_raw()) {
            Ok(h) => h,
            Err(e) => {
                self.guarded_now.fetch_sub(1, Ordering::AcqRel);
                return Err(e);
            }
        };
        let op = GuardedOp::new(handle.clone(), buffer, registry.geometry()).with_counters(self.counters);
        match registry.commit(reservation, op, &Mprotect) {
            Ok(id) => {
                self.counters.protect();
                self.push(Pending::Protected {
                    id,
                    handle: handle.clone(),
                });
                Ok(SendToken {
                    path: SendPath::Protected,
                    op: Some(id),
                    handle,
                })
            }
            Err(_) => {
                // The zero-copy transfer is already running unprotected;
                // the only safe fallback left is to wait it out.
                self.guarded_now.fetch_sub(1, Ordering::AcqRel);
                self.counters.fallback();
                handle.wait();
                Ok(SendToken {
                    path: SendPath::Blocking,
                    op: None,
                    handle,
                })
            }
        }
    }

    unsafe fn send_copy(&self, dst: Rank, tag: Tag, buffer: BufferDesc) -> Result<SendToken> {
        let mut staging = self.pool.take(buffer.len());
        staging.extend_from_slice(std::slice::from_raw_parts(buffer.start() as *const u8, buffer.len()));
        // The heap block behind `staging` does not move when the Vec is
        // moved into the pending set.
        let handle = self.transport.isend(dst, tag, &staging[..])?;
        self.counters.copy(buffer.len());
        self.push(Pending::Copied {
            handle: handle.clone(),
            staging,
        });
        Ok(SendToken {
            path: SendPath::Copied,
            op: None,
            handle,
        })
    }

    fn push(&self, p: Pending) {
        self.pending.lock().unwrap().entries.push(p);
    }

    /// Harvests finished sends: releases their registrations, unprotects
    /// pages no other in-flight send covers and recycles staging buffers.
    /// Returns how many sends were harvested.
    pub fn check_for_completed(&self) -> usize {
        let mut pending = self.pending.lock().unwrap();
        let mut harvested = 0;
        let mut i = 0;
        while i < pending.entries.len() {
            if !pending.entries[i].handle().is_complete() {
                i += 1;
                continue;
            }
            match pending.entries.swap_remove(i) {
                Pending::Protected { id, .. } => {
                    let released = self
                        .guard
                        .registry()
                        .release_with(id, &Mprotect)
                        .unwrap_or_else(|e| panic!("pages of {id} left read-only: {e}"));
                    if !released.freed_pages.is_empty() {
                        self.counters.unprotect(1);
                    }
                    self.guarded_now.fetch_sub(1, Ordering::AcqRel);
                }
                Pending::Copied { staging, .. } => self.pool.give(staging),
                Pending::Plain { .. } => {}
            }
            harvested += 1;
        }
        harvested
    }

    /// Blocks until every pending send has completed and been harvested.
    pub fn wait_all(&self) {
        loop {
            self.check_for_completed();
            let next = {
                let pending = self.pending.lock().unwrap();
                match pending.entries.first() {
                    Some(p) => p.handle().clone(),
                    None => return,
                }
            };
            next.wait();
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.lock().unwrap().len()
    }

    pub fn pending_protected(&self) -> Vec<OpId> {
        self.pending.lock().unwrap().protected_ids()
    }

    pub fn guard_stats(&self) -> GuardStats {
        self.counters.snapshot()
    }

    /// Counters shared with the fault handler.
    pub fn counters(&self) -> &'static GuardCounters {
        self.counters
    }
}

impl<T: Transport> Drop for PageGuard<T> {
    fn drop(&mut self) {
        // Leaving pages read-only behind would break unrelated code later.
        self.wait_all();
    }
}

/// Rejects a buffer that is not fully inside `bytes`.
pub fn desc_within(bytes: &[u8], offset: usize, len: usize) -> Result<BufferDesc> {
    if offset.checked_add(len).is_none_or(|end| end > bytes.len()) {
        return Err(Error::InvalidBuffer("slice outside the source"));
    }
    BufferDesc::new(bytes.as_ptr() as usize + offset, len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_decisions() {
        let p = SendPolicy::default();
        assert!(!p.protects(64));
        assert!(!p.protects(4095));
        assert!(p.protects(4096));
        assert!(!SendPolicy::always(ModeOverride::AlwaysCopy).protects(1 << 20));
        assert!(SendPolicy::always(ModeOverride::AlwaysProtect).protects(1));
        assert!(SendPolicy::with_threshold(0).protects(1));
    }

    #[test]
    fn pool_reuses_buffers() {
        let pool = StagingPool {
            free: Mutex::default(),
            keep: 2,
            buf_size: 128,
        };
        let a = pool.take(10);
        let ptr = a.as_ptr();
        pool.give(a);
        let b = pool.take(100);
        assert_eq!(b.as_ptr(), ptr);
        assert!(pool.take(1000).capacity() >= 1000);
    }
}
