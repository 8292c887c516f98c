//! Deterministic seed derivation.
//!
//! Every stochastic stage of the pipeline draws from its own `ChaCha8Rng`
//! seeded through [`derive_seed`], so results are independent of execution
//! order and thread count. The mixer is the splitmix64 finalizer, which is
//! platform-independent and has no shared state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z
}

/// Derive a child seed from a master seed and a tag path.
///
/// Tag order matters: `derive_seed(s, &[a, b]) != derive_seed(s, &[b, a])`
/// in general, and appending a tag always yields a new stream.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = mix(master ^ 0xd1b5_4a32_d192_ed03);
    for &t in tags {
        h = mix(h ^ mix(t ^ 0x9e37_79b9_7f4a_7c15));
    }
    h
}

/// RNG for one derived stream.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stage tags used by the pipeline; kept in one place so derived streams
/// never collide across modules.
pub mod stage {
    pub const WORLD: u64 = 0x01;
    pub const REAL_COVS: u64 = 0x02;
    pub const MOCK_COVS: u64 = 0x03;
    pub const POPULATION: u64 = 0x04;
    pub const SURFACE: u64 = 0x05;
    pub const SAMPLE: u64 = 0x06;
    pub const CV: u64 = 0x07;
    pub const EXP2_SIZE: u64 = 0x08;
    pub const COVARIATE_SPLIT: u64 = 0x09;
    pub const COEFFICIENTS: u64 = 0x0a;
    pub const INTERCEPT: u64 = 0x0b;
    pub const CASES: u64 = 0x0c;
    pub const RETRY: u64 = 0x0d;
}
