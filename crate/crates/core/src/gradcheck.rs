//! Central finite-difference checks for analytic gradients.

use crate::error::{PmlError, Result};
use crate::loss::{loss_gradient, total_loss, DEFAULT_EPSILON};
use crate::pyramid::DensityMap;
use crate::rng::{derive_seed, SplitMix64};
use crate::sample::random_batch;

/// Relative step; the actual step for coordinate `x` is `step * max(1, |x|)`.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Central differences of `f` at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst entrywise relative error `|a - n| / max(|a|, |n|, floor)` where
/// `floor` is `1e-3` of the largest numeric magnitude, so entries three
/// orders of magnitude below the gradient's scale are measured against
/// that scale instead of their own.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| ((a - n).abs() / a.abs().max(n.abs()).max(floor), i))
        .fold((0.0, 0), |best, cur| if cur.0 > best.0 { cur } else { best })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub level: usize,
    pub n: usize,
    pub batch: usize,
    pub epsilon: f64,
    pub step: f64,
}

impl GradCheckConfig {
    pub fn new(seed: u64, level: usize, n: usize) -> Self {
        Self {
            seed,
            level,
            n,
            batch: 2,
            epsilon: DEFAULT_EPSILON,
            step: DEFAULT_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(batch item, cell)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares [`loss_gradient`] against central differences of [`total_loss`]
/// on a random batch drawn from `seed`.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.n > cfg.level {
        return Err(PmlError::InvalidArgument(format!(
            "n = {} exceeds level {}",
            cfg.n, cfg.level
        )));
    }
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[cfg.level as u64, cfg.n as u64]));
    let (preds, gts) = random_batch(&mut rng, cfg.level, cfg.batch);
    let analytic: Vec<f64> = loss_gradient(&preds, &gts, cfg.n, cfg.epsilon)?
        .into_iter()
        .flat_map(DensityMap::into_data)
        .collect();

    let cells = preds[0].data().len();
    let flat: Vec<f64> = preds.iter().flat_map(|m| m.data().iter().copied()).collect();
    let numeric = central_difference(
        |x| {
            let maps = x
                .chunks_exact(cells)
                .map(|c| DensityMap::new(cfg.level, c.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            Ok(total_loss(&maps, &gts, cfg.n, cfg.epsilon)?.total)
        },
        &flat,
        cfg.step,
    )?;
    let (err, idx) = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        max_relative_error: err,
        worst: (idx / cells, idx % cells),
        analytic: analytic[idx],
        numeric: numeric[idx],
        checked: analytic.len(),
    })
}
