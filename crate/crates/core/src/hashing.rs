//! Stable 64-bit hashing for feature indices, state fingerprints, and RNG
//! stream derivation.
//!
//! Everything that must reproduce across builds goes through this module
//! instead of `std::hash`: the standard hasher is explicitly allowed to change
//! between releases, and checkpoints, feature maps, and anchor fingerprints
//! all outlive a single process. The scheme is FNV-1a over little-endian
//! bytes followed by a splitmix64 finalizer (plain FNV has weak low bits,
//! and feature hashing reduces modulo a power of two).

/// Version stamp for the hashing scheme. Stored in checkpoints; a checkpoint
/// written under a different version is rejected at load time because its
/// weights are tied to a different feature layout.
pub const HASH_VERSION: u32 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a hasher with a mixing finalizer.
#[derive(Clone, Copy, Debug)]
pub struct StableHasher(u64);

impl StableHasher {
    pub fn new() -> Self {
        StableHasher(FNV_OFFSET)
    }

    pub fn bytes(mut self, data: &[u8]) -> Self {
        for &b in data {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn u64(self, v: u64) -> Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(self, v: u32) -> Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn str(self, s: &str) -> Self {
        // Length prefix keeps ("ab","c") distinct from ("a","bc").
        self.u64(s.len() as u64).bytes(s.as_bytes())
    }

    pub fn finish(self) -> u64 {
        mix64(self.0)
    }
}

impl Default for StableHasher {
    fn default() -> Self {
        Self::new()
    }
}

/// splitmix64 finalizer. Bijective, so it cannot introduce collisions on top
/// of the accumulated FNV state.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the seed for an independent RNG stream from the run seed, a
/// purpose label, and positional indices (stage, group, member, ...).
///
/// Keeping every stream a pure function of `(seed, purpose, indices)` is what
/// lets a resumed run replay the exact randomness of the uninterrupted one
/// without serializing generator state.
pub fn stream_seed(seed: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut h = StableHasher::new().u32(HASH_VERSION).u64(seed).str(purpose);
    for &ix in indices {
        h = h.u64(ix);
    }
    h.finish()
}
