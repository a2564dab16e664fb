use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Live counters for one sender. Updated from normal context and from the
/// fault handler, so everything is a plain atomic.
#[derive(Debug, Default)]
pub struct GuardCounters {
    protects: AtomicU64,
    unprotects: AtomicU64,
    faults_guarded: AtomicU64,
    faults_false_positive: AtomicU64,
    copies: AtomicU64,
    bytes_copied: AtomicU64,
    block_ns: AtomicU64,
    fallbacks: AtomicU64,
}

impl GuardCounters {
    /// Counters with static lifetime, as the fault handler needs.
    pub fn leak() -> &'static GuardCounters {
        Box::leak(Box::default())
    }

    pub(crate) fn protect(&self) {
        self.protects.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn unprotect(&self, n: u64) {
        self.unprotects.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn copy(&self, bytes: usize) {
        self.copies.fetch_add(1, Ordering::Relaxed);
        self.bytes_copied.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub(crate) fn fallback(&self) {
        self.fallbacks.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn fault(&self, false_positive: bool, blocked: Duration) {
        if false_positive {
            self.faults_false_positive.fetch_add(1, Ordering::Relaxed);
        } else {
            self.faults_guarded.fetch_add(1, Ordering::Relaxed);
        }
        self.block_ns.fetch_add(blocked.as_nanos() as u64, Ordering::Relaxed);
    }

    /// Point-in-time copy. Each counter is read once; counters only grow, so
    /// every field is at least its value in any earlier snapshot.
    pub fn snapshot(&self) -> GuardStats {
        GuardStats {
            protects: self.protects.load(Ordering::Relaxed),
            unprotects: self.unprotects.load(Ordering::Relaxed),
            faults_guarded: self.faults_guarded.load(Ordering::Relaxed),
            faults_false_positive: self.faults_false_positive.load(Ordering::Relaxed),
            copies: self.copies.load(Ordering::Relaxed),
            bytes_copied: self.bytes_copied.load(Ordering::Relaxed),
            total_block_time: Duration::from_nanos(self.block_ns.load(Ordering::Relaxed)),
            fallbacks: self.fallbacks.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardStats {
    /// Sends whose buffer was made read-only.
    pub protects: u64,
    /// Unprotect calls, from harvesting or from the fault handler.
    pub unprotects: u64,
    /// Faults on a byte that belongs to an in-flight buffer.
    pub faults_guarded: u64,
    /// Faults on a guarded page outside every in-flight buffer.
    pub faults_false_positive: u64,
    pub copies: u64,
    pub bytes_copied: u64,
    pub total_block_time: Duration,
    /// Protected sends that fell back to copying (capacity or mprotect failure).
    pub fallbacks: u64,
}

impl GuardStats {
    pub fn faults(&self) -> u64 {
        self.faults_guarded + self.faults_false_positive
    }
}
