//! Seeded random streams.
//!
//! A root seed expands into independent streams by ChaCha stream id:
//! stream `k` of root `s` is `ChaCha20Rng::seed_from_u64(s)` with
//! `set_stream(k)`. Two runs that must share noise draws (for example a
//! purification guided by `x_adv` and its twin guided by `x_ori`) use the
//! same `(root, stream)` pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub type LabRng = ChaCha20Rng;

pub fn stream(root: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha20Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng
}

/// Combines a root seed with a run key into a new root. Used to derive
/// per-experiment roots (e.g. data generation vs. attack vs. sampling).
pub fn derive_seed(root: u64, key: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = root ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
