//! Seeded random prediction/ground-truth batches for checks and experiments.

use crate::pyramid::{cells, DensityMap};
use crate::rng::SplitMix64;

/// Predictions are uniform in `[0, 2)`; ground truths are integer counts in `{0, 1, 2}`.
pub fn random_batch(rng: &mut SplitMix64, level: usize, batch: usize) -> (Vec<DensityMap>, Vec<DensityMap>) {
    let preds = (0..batch)
        .map(|_| {
            let data = (0..cells(level)).map(|_| rng.uniform_range(0.0, 2.0)).collect();
            DensityMap::from_parts(level, data)
        })
        .collect();
    let gts = (0..batch)
        .map(|_| {
            let data = (0..cells(level)).map(|_| rng.below(3) as f64).collect();
            DensityMap::from_parts(level, data)
        })
        .collect();
    (preds, gts)
}

/// A map with independent uniform entries in `[lo, hi)`.
pub fn random_map(rng: &mut SplitMix64, level: usize, lo: f64, hi: f64) -> DensityMap {
    let data = (0..cells(level)).map(|_| rng.uniform_range(lo, hi)).collect();
    DensityMap::from_parts(level, data)
}
