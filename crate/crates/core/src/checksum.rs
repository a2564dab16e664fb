//! 64-bit FNV-1a, used to fingerprint message payloads.

const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

/// Streaming FNV-1a hasher. Feeding bytes in any split yields the same
/// digest as hashing them in one call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub const fn new() -> Self {
        Fnv1a(OFFSET_BASIS)
    }

    #[inline]
    pub fn update(&mut self, bytes: &[u8]) {
        let mut h = self.0;
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
        self.0 = h;
    }

    pub const fn digest(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Payload fingerprint a transport computes for corruption reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChecksumKind {
    #[default]
    Fnv1a64,
    /// No fingerprinting; every digest is 0, so corruption goes unnoticed.
    Off,
}

impl ChecksumKind {
    pub fn running(self) -> Running {
        Running {
            kind: self,
            h: Fnv1a::new(),
        }
    }

    pub fn of(self, bytes: &[u8]) -> u64 {
        let mut r = self.running();
        r.update(bytes);
        r.digest()
    }
}

/// A streaming digest of whichever [`ChecksumKind`] was chosen.
#[derive(Debug, Clone, Copy)]
pub struct Running {
    kind: ChecksumKind,
    h: Fnv1a,
}

impl Running {
    #[inline]
    pub fn update(&mut self, bytes: &[u8]) {
        if self.kind == ChecksumKind::Fnv1a64 {
            self.h.update(bytes);
        }
    }

    pub fn digest(&self) -> u64 {
        match self.kind {
            ChecksumKind::Fnv1a64 => self.h.digest(),
            ChecksumKind::Off => 0,
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(bytes);
    h.digest()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn published_vectors() {
        // Reference values from the FNV test suite.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn off_digests_nothing() {
        assert_eq!(ChecksumKind::Off.of(b"foobar"), 0);
        assert_eq!(ChecksumKind::Fnv1a64.of(b"foobar"), 0x85944171f73967e8);
    }

    proptest! {
        #[test]
        fn streaming_matches_one_shot(data in proptest::collection::vec(any::<u8>(), 0..512), split in 0usize..512) {
            let split = split.min(data.len());
            let mut h = Fnv1a::new();
            h.update(&data[..split]);
            h.update(&data[split..]);
            prop_assert_eq!(h.digest(), fnv1a64(&data));
        }
    }
}
