use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

use super::NodeId;

/// Deterministic pseudo-random stream keyed by `(seed, node, purpose)`.
///
/// Streams never depend on the order in which other streams were created or
/// consumed, so iteration order over unordered collections cannot leak into
/// simulation results.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: Pcg64,
}

fn mix(state: u64, word: u64) -> u64 {
    // splitmix64 finalizer over the running state.
    let mut z = state ^ word.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn node_word(node: NodeId) -> u64 {
    (u64::from(node.role.to_byte()) << 32) | u64::from(node.id)
}

fn key(seed: u64, words: &[u64], purpose: &str) -> u64 {
    let mut h = mix(0x6d63_6173_745f_7267, seed);
    for &w in words {
        h = mix(h, w);
    }
    for chunk in purpose.as_bytes().chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        h = mix(h, u64::from_le_bytes(buf));
    }
    mix(h, purpose.len() as u64)
}

/// Stream private to one node and purpose.
pub fn derive_rng(seed: u64, node: NodeId, purpose: &str) -> RngStream {
    RngStream::from_key(key(seed, &[node_word(node)], purpose))
}

/// Stream private to one directed node pair and purpose.
pub fn derive_link_rng(seed: u64, src: NodeId, dst: NodeId, purpose: &str) -> RngStream {
    RngStream::from_key(key(seed, &[node_word(src), node_word(dst)], purpose))
}

impl RngStream {
    fn from_key(k: u64) -> Self {
        Self {
            rng: Pcg64::seed_from_u64(k),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Bernoulli trial; always consumes exactly one draw.
    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Uniform in `[lo, hi)`; consumes one draw even when `lo == hi`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}
