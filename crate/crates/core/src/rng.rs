//! Reproducible Brownian increments.
//!
//! Every path owns an independent ChaCha stream selected by its index, so the
//! increments of a path depend only on `(seed, path)` and never on how paths
//! are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// `n_steps` increments of a one-dimensional Brownian motion with step `dt`.
pub fn brownian_increments(seed: u64, path: usize, n_steps: usize, dt: f64) -> Vec<f64> {
    let mut rng = path_rng(seed, path);
    let s = dt.sqrt();
    (0..n_steps)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * s
        })
        .collect()
}
