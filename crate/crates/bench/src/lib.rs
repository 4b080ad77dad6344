//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use spmim::train::mask_levels;
use spmim::{sample_mask, SpatialMask, Tensor};

/// Random `[n, 3, size, size]` batch in `[0, 1]`.
pub fn batch(n: usize, size: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[n, 3, size, size], 0.0, 1.0, &mut spmim::rng::rng_from_seed(seed))
}

/// Mask levels `0..=5` for `n` images at the given ratio.
pub fn masks(n: usize, size: usize, ratio: f64, seed: u64) -> Vec<Arc<SpatialMask>> {
    let grids: Vec<_> = (0..n)
        .map(|i| sample_mask(size / 32, size / 32, ratio, seed + i as u64).expect("valid grid"))
        .collect();
    mask_levels(&grids, size, size).expect("valid levels")
}
