//! Seeded random streams.
//!
//! Every consumer of randomness (initialization, sampling, noise, data)
//! draws from its own ChaCha20 stream derived from one root seed and a
//! purpose label, so adding draws in one place never perturbs another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::hash::Hasher;

pub type StreamRng = ChaCha20Rng;

/// Seed for the stream `label` under `root`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write_u64(root);
    h.write(label.as_bytes());
    splitmix64(h.finish())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(root: u64, label: &str) -> StreamRng {
    ChaCha20Rng::seed_from_u64(derive_seed(root, label))
}

/// Two independent standard normals by the Box–Muller transform.
pub fn normal_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Fills `out` with N(0, std²) draws.
pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64], std: f64) {
    let mut chunks = out.chunks_exact_mut(2);
    for pair in &mut chunks {
        let (a, b) = normal_pair(rng);
        pair[0] = a * std;
        pair[1] = b * std;
    }
    if let [last] = chunks.into_remainder() {
        *last = normal_pair(rng).0 * std;
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_normal(rng, &mut v, std);
    v
}
