//! Seed derivation shared by every stochastic component.
//!
//! All randomness in a run is a pure function of the global seed and a
//! tuple of indices, so any completion can be regenerated by any node and
//! parallel schedules cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of the same indices apart.
pub mod stream {
    pub const COMPLETION: u64 = 0x636f_6d70;
    pub const GLOBAL_SELECT: u64 = 0x676c_6f62;
    pub const LOCAL_SELECT: u64 = 0x6c6f_6361;
    pub const VALIDATION: u64 = 0x7661_6c69;
    pub const JUDGE: u64 = 0x6a75_6467;
    pub const GARBAGE: u64 = 0x6761_7262;
    pub const INIT: u64 = 0x696e_6974;
    pub const WARM_START: u64 = 0x7761_726d;
    pub const DATASET: u64 = 0x6461_7461;
    pub const ANALYSIS: u64 = 0x616e_616c;
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive fold of `parts` into a single 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_0fd6_0000_u64, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

/// Seed of completion `completion_index` of prompt `prompt_index`
/// generated by `node` in `round`.
pub fn completion_seed(
    global: u64,
    round: u64,
    node: u64,
    prompt_index: u64,
    completion_index: u64,
) -> u64 {
    derive(&[
        stream::COMPLETION,
        global,
        round,
        node,
        prompt_index,
        completion_index,
    ])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
