//! Counter-based noise streams.
//!
//! Each `(seed, node, replicate)` triple owns an independent stream whose
//! state is a pure function of the triple, so draws never depend on traversal
//! order or on how work is split across threads. The generator is SplitMix64
//! started from a mixed key; it is fast and statistically sound for
//! simulation but is not a cryptographic source.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for a node id (FNV-1a, then finalized).
pub fn node_key(id: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(h)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseStream {
    state: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, node: u64, replicate: u64) -> Self {
        let k = mix64(seed ^ GOLDEN);
        let k = mix64(k ^ node);
        let k = mix64(k.wrapping_add(replicate.wrapping_mul(GOLDEN)));
        Self { state: k }
    }

    pub fn for_node(seed: u64, node_id: &str, replicate: u64) -> Self {
        Self::new(seed, node_key(node_id), replicate)
    }
}

impl RngCore for NoiseStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// Seed for an independent sub-run (for example one replicate of a
/// downstream simulation) derived from a parent seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ GOLDEN).wrapping_add(index.wrapping_mul(GOLDEN)))
}
