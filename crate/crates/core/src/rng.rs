//! Seeded RNG stream derivation.
//!
//! Every stochastic site in the pipeline draws from a ChaCha8 stream derived
//! from the global seed plus a structural key (stream tag, iteration, prompt
//! slot, group index, ...). Streams are therefore reproducible and independent
//! of evaluation order: sampling trajectory (p, g) never consumes randomness
//! destined for (p, g+1).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keeping unrelated draws on disjoint streams.
pub mod stream {
    pub const POLICY_INIT: u64 = 1;
    pub const EM_INIT: u64 = 2;
    pub const CORPUS: u64 = 3;
    pub const PROMPT: u64 = 4;
    pub const CONSTRAINT: u64 = 5;
    pub const TRAJECTORY: u64 = 6;
    pub const EVAL: u64 = 7;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a ChaCha8 RNG from a global seed and a structural key.
///
/// The key parts are chained through splitmix64 so that nearby keys
/// (e.g. consecutive group indices) produce unrelated streams.
pub fn derive_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ 0x5bf0_3635_16f5_cc93);
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
