//! Per-level L2, difference losses, the progressive multi-resolution loss
//! and its analytic gradient.
//!
//! Every quantity works on the sum pyramid of `pred - gt`: because sum
//! pooling is linear, the level-`i` error map of a pair is the level-`i`
//! pooling of their difference, and the residual difference
//! `r_hat - r` is the residual of that difference.
//!
//! Batch expectations are means over the batch taken before any log, and
//! every batch reduction runs sequentially in index order.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use crate::error::{PmlError, Result};
use crate::pyramid::{add_upsampled, cells, halve, DensityMap};
use crate::resolution::ResolutionSet;

/// Guard added inside every log.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Number of sub-resolution levels used by default (`1x1` up to `16x16`).
pub const DEFAULT_N: usize = 4;

/// Checks a prediction/ground-truth batch and returns the shared level.
pub(crate) fn batch_level(preds: &[DensityMap], gts: &[DensityMap]) -> Result<usize> {
    if preds.is_empty() {
        return Err(PmlError::EmptyBatch);
    }
    if preds.len() != gts.len() {
        return Err(PmlError::BatchLength {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let level = preds[0].level();
    for m in preds.iter().chain(gts) {
        m.expect_level(level)?;
    }
    Ok(level)
}

/// Sum pyramid of `pred - gt` at every level `0..=L`, indexed by level.
struct ErrorPyramid {
    levels: Vec<Vec<f64>>,
}

impl ErrorPyramid {
    fn new(pred: &DensityMap, gt: &DensityMap) -> Self {
        let top = pred.level();
        let mut levels = vec![Vec::new(); top + 1];
        levels[top] = pred.data().iter().zip(gt.data()).map(|(p, g)| p - g).collect();
        for l in (0..top).rev() {
            levels[l] = halve(&levels[l + 1], l + 1);
        }
        Self { levels }
    }

    fn sq_norm(&self, level: usize) -> f64 {
        self.levels[level].iter().map(|v| v * v).sum()
    }

    /// `|| e_fine - 4^(coarse - fine) U(e_coarse) ||^2`.
    fn residual_sq_norm(&self, coarse: usize, fine: usize) -> f64 {
        let spread = 1.0 / cells(fine - coarse) as f64;
        let factor = 1usize << (fine - coarse);
        let (fs, cs) = (1usize << fine, 1usize << coarse);
        let (f, c) = (&self.levels[fine], &self.levels[coarse]);
        let mut acc = 0.0;
        for r in 0..fs {
            let crow = &c[(r / factor) * cs..(r / factor + 1) * cs];
            for (col, v) in f[r * fs..(r + 1) * fs].iter().enumerate() {
                let d = v - spread * crow[col / factor];
                acc += d * d;
            }
        }
        acc
    }

    fn residual(&self, coarse: usize, fine: usize) -> Vec<f64> {
        let mut out = self.levels[fine].clone();
        add_upsampled(
            &mut out,
            fine,
            &self.levels[coarse],
            coarse,
            -1.0 / cells(fine - coarse) as f64,
        );
        out
    }
}

struct BatchErrors {
    level: usize,
    items: Vec<ErrorPyramid>,
}

impl BatchErrors {
    fn new(preds: &[DensityMap], gts: &[DensityMap]) -> Result<Self> {
        let level = batch_level(preds, gts)?;
        let items = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| ErrorPyramid::new(p, g))
            .collect();
        Ok(Self { level, items })
    }

    fn check(&self, level: usize) -> Result<()> {
        if level > self.level {
            return Err(PmlError::LevelOrder {
                from: self.level,
                to: level,
            });
        }
        Ok(())
    }

    fn mean(&self, f: impl Fn(&ErrorPyramid) -> f64) -> f64 {
        let mut acc = 0.0;
        for item in &self.items {
            acc += f(item);
        }
        acc / self.items.len() as f64
    }

    fn l2(&self, level: usize) -> Result<f64> {
        self.check(level)?;
        Ok(self.mean(|e| e.sq_norm(level)))
    }

    fn ldiff(&self, coarse: usize, fine: usize) -> Result<f64> {
        self.check(fine)?;
        if coarse >= fine {
            return Err(PmlError::LevelOrder {
                from: coarse,
                to: fine,
            });
        }
        Ok(self.mean(|e| e.residual_sq_norm(coarse, fine)))
    }
}

/// Batch mean of `|| S_i(pred) - S_i(gt) ||^2`, with `S_i` sum pooling to level `i`.
pub fn l2_level(preds: &[DensityMap], gts: &[DensityMap], level: usize) -> Result<f64> {
    BatchErrors::new(preds, gts)?.l2(level)
}

/// Difference loss between consecutive levels `j - 1` and `j`, computed as
/// the batch mean of the squared residual difference (never negative).
pub fn l_diff(preds: &[DensityMap], gts: &[DensityMap], j: usize) -> Result<f64> {
    if j == 0 {
        return Err(PmlError::InvalidArgument(
            "difference loss needs j >= 1 (level 0 has no coarser level)".into(),
        ));
    }
    l_diff_pair(preds, gts, j - 1, j)
}

/// Difference loss for an arbitrary level pair `coarse < fine`, residual form.
pub fn l_diff_pair(preds: &[DensityMap], gts: &[DensityMap], coarse: usize, fine: usize) -> Result<f64> {
    BatchErrors::new(preds, gts)?.ldiff(coarse, fine)
}

/// Difference loss by subtraction: `L2^fine - 4^(coarse - fine) L2^coarse`.
pub fn l_diff_pair_subtractive(
    preds: &[DensityMap],
    gts: &[DensityMap],
    coarse: usize,
    fine: usize,
) -> Result<f64> {
    if coarse >= fine {
        return Err(PmlError::LevelOrder {
            from: coarse,
            to: fine,
        });
    }
    let errors = BatchErrors::new(preds, gts)?;
    Ok(errors.l2(fine)? - errors.l2(coarse)? / cells(fine - coarse) as f64)
}

/// Per-level L2 values and consecutive-pair difference losses of a resolution set.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub l2: BTreeMap<usize, f64>,
    pub ldiff: BTreeMap<(usize, usize), f64>,
}

impl LevelStats {
    pub fn compute(preds: &[DensityMap], gts: &[DensityMap], levels: &ResolutionSet) -> Result<Self> {
        let errors = BatchErrors::new(preds, gts)?;
        let mut l2 = BTreeMap::new();
        for &l in levels.levels() {
            l2.insert(l, errors.l2(l)?);
        }
        let mut ldiff = BTreeMap::new();
        for w in levels.levels().windows(2) {
            ldiff.insert((w[0], w[1]), errors.ldiff(w[0], w[1])?);
        }
        Ok(Self { l2, ldiff })
    }

    pub fn l2(&self, level: usize) -> Result<f64> {
        self.l2
            .get(&level)
            .copied()
            .ok_or_else(|| PmlError::InvalidArgument(format!("no L2 value for level {level}")))
    }

    pub fn ldiff(&self, coarse: usize, fine: usize) -> Result<f64> {
        self.ldiff.get(&(coarse, fine)).copied().ok_or_else(|| {
            PmlError::InvalidArgument(format!("no difference loss for pair ({coarse}, {fine})"))
        })
    }
}

/// Variance weights `alpha_0..alpha_n` that turn the weighted average of the
/// per-`n` log-likelihoods into a unit-weight sum of log terms.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaCoefficients {
    pub n: usize,
    pub alpha: Vec<f64>,
}

impl AlphaCoefficients {
    /// `sum_k alpha_k [ sum_{j<=k} (4^j - 4^(j-1)) log ldiff_j + log l2_0 ]`,
    /// with `ldiff[j - 1]` holding the `(j - 1, j)` difference loss.
    pub fn reweighted_log_likelihood(&self, l2_0: f64, ldiff: &[f64]) -> Result<f64> {
        if ldiff.len() != self.n {
            return Err(PmlError::InvalidArgument(format!(
                "expected {} difference losses, got {}",
                self.n,
                ldiff.len()
            )));
        }
        let mut total = 0.0;
        for (k, a) in self.alpha.iter().enumerate() {
            let mut inner = l2_0.ln();
            for (j, d) in ldiff.iter().enumerate().take(k) {
                inner += level_gap(j + 1) * d.ln();
            }
            total += a * inner;
        }
        Ok(total)
    }
}

/// `4^j - 4^(j-1)`.
fn level_gap(j: usize) -> f64 {
    (cells(j) - cells(j - 1)) as f64
}

/// Solves `(4^j - 4^(j-1)) sum_{k>=j} alpha_k = 1` for `j = 1..n` together
/// with `sum_k alpha_k = 1` by back-substitution.
pub fn alpha_coefficients(n: usize) -> Result<AlphaCoefficients> {
    if n == 0 {
        return Err(PmlError::InvalidArgument("alpha system needs n >= 1".into()));
    }
    // tail[j] = sum_{k>=j} alpha_k
    let tail: Vec<f64> = (1..=n).map(|j| 1.0 / level_gap(j)).collect();
    let mut alpha = vec![0.0; n + 1];
    alpha[0] = 1.0 - tail[0];
    for j in 1..=n {
        let next = if j < n { tail[j] } else { 0.0 };
        alpha[j] = tail[j - 1] - next;
    }
    Ok(AlphaCoefficients { n, alpha })
}

/// Maximum-likelihood variances for a chain of sub-levels.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaEstimate {
    /// `sigma_j^2` keyed by position `j` in the sub-level chain.
    pub sigma_sq: BTreeMap<usize, f64>,
    /// Set when a non-positive loss value was replaced by the log guard.
    pub degenerate: bool,
}

/// Optimal Gaussian variances for the sub-levels `n_0 < ... < n_k` of `levels`:
/// `sigma_0^2 = 4^-n_0 L2^n_0` and
/// `sigma_j^2 = ldiff(n_{j-1}, n_j) / (4^n_j - 4^n_{j-1})`.
///
/// Non-positive loss values are replaced by `epsilon` and flagged; with
/// `epsilon == 0` they are an error instead.
pub fn optimal_sigma(stats: &LevelStats, levels: &ResolutionSet, epsilon: f64) -> Result<SigmaEstimate> {
    sigma_for_chain(stats, levels.sub_levels(), epsilon)
}

pub(crate) fn sigma_for_chain(stats: &LevelStats, chain: &[usize], epsilon: f64) -> Result<SigmaEstimate> {
    if chain.is_empty() {
        return Err(PmlError::InvalidResolutionSet(
            "need at least one sub-level to estimate variances".into(),
        ));
    }
    let mut degenerate = false;
    let mut guard = |index: usize, value: f64| -> Result<f64> {
        if value > 0.0 {
            Ok(value)
        } else if epsilon > 0.0 {
            degenerate = true;
            Ok(epsilon)
        } else {
            Err(PmlError::DegenerateVariance { index, value })
        }
    };
    let mut sigma_sq = BTreeMap::new();
    let n0 = chain[0];
    sigma_sq.insert(0, guard(0, stats.l2(n0)?)? / cells(n0) as f64);
    for (j, w) in chain.windows(2).enumerate() {
        let value = guard(j + 1, stats.ldiff(w[0], w[1])?)?;
        sigma_sq.insert(j + 1, value / (cells(w[1]) - cells(w[0])) as f64);
    }
    Ok(SigmaEstimate {
        sigma_sq,
        degenerate,
    })
}

/// Every term of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub n: usize,
    pub prediction_level: usize,
    /// L2 at levels `0..=n` and at the prediction level.
    pub l2_per_level: BTreeMap<usize, f64>,
    /// Difference losses for `(j - 1, j)`, `j = 1..=n`.
    pub ldiff_per_pair: BTreeMap<(usize, usize), f64>,
    pub pml: f64,
    /// Unit-weight `L2^L` term; zero when the regularizer is off.
    pub regularizer: f64,
    pub total: f64,
    pub sigma_sq: BTreeMap<usize, f64>,
    pub sigma_degenerate: bool,
    pub epsilon: f64,
}

impl LossBreakdown {
    /// Flat `(key, value)` view used by the text and JSON reports.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (l, v) in &self.l2_per_level {
            out.push((format!("l2.{l}"), *v));
        }
        for ((a, b), v) in &self.ldiff_per_pair {
            out.push((format!("ldiff.{a}-{b}"), *v));
        }
        for (j, v) in &self.sigma_sq {
            out.push((format!("sigma_sq.{j}"), *v));
        }
        out.push(("pml".into(), self.pml));
        out.push(("regularizer".into(), self.regularizer));
        out.push(("total".into(), self.total));
        out.push(("epsilon".into(), self.epsilon));
        out
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v:.16e}\n"));
        }
        s.push_str(&format!("sigma_degenerate = {}\n", self.sigma_degenerate));
        s
    }

    pub fn to_json(&self) -> String {
        let mut map = Map::new();
        for (k, v) in self.entries() {
            map.insert(k, Value::from(v));
        }
        map.insert("sigma_degenerate".into(), Value::from(self.sigma_degenerate));
        Value::Object(map).to_string()
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(PmlError::InvalidArgument(format!(
            "log guard must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

fn evaluate(
    errors: &BatchErrors,
    n: usize,
    epsilon: f64,
    regularized: bool,
) -> Result<LossBreakdown> {
    check_epsilon(epsilon)?;
    let top = errors.level;
    if n > top {
        return Err(PmlError::InvalidArgument(format!(
            "n = {n} exceeds the prediction level {top}"
        )));
    }
    let mut l2_per_level = BTreeMap::new();
    for l in (0..=n).chain(std::iter::once(top)) {
        l2_per_level.insert(l, errors.l2(l)?);
    }
    let mut ldiff_per_pair = BTreeMap::new();
    for j in 1..=n {
        ldiff_per_pair.insert((j - 1, j), errors.ldiff(j - 1, j)?);
    }
    let mut pml = (l2_per_level[&0] + epsilon).ln();
    for v in ldiff_per_pair.values() {
        pml += (v + epsilon).ln();
    }
    let regularizer = if regularized { l2_per_level[&top] } else { 0.0 };
    let stats = LevelStats {
        l2: l2_per_level.clone(),
        ldiff: ldiff_per_pair.clone(),
    };
    let chain: Vec<usize> = (0..=n).collect();
    let sigma = sigma_for_chain(&stats, &chain, epsilon)?;
    Ok(LossBreakdown {
        n,
        prediction_level: top,
        l2_per_level,
        ldiff_per_pair,
        pml,
        regularizer,
        total: pml + regularizer,
        sigma_sq: sigma.sigma_sq,
        sigma_degenerate: sigma.degenerate,
        epsilon,
    })
}

/// `log(L2^0 + eps) + sum_{j=1..n} log(ldiff(j-1, j) + eps)`; the regularizer is zero.
pub fn pml_loss(preds: &[DensityMap], gts: &[DensityMap], n: usize, epsilon: f64) -> Result<LossBreakdown> {
    evaluate(&BatchErrors::new(preds, gts)?, n, epsilon, false)
}

/// The progressive loss plus the unit-weight full-resolution `L2^L` term (no log).
pub fn total_loss(preds: &[DensityMap], gts: &[DensityMap], n: usize, epsilon: f64) -> Result<LossBreakdown> {
    evaluate(&BatchErrors::new(preds, gts)?, n, epsilon, true)
}

/// Gradient of [`total_loss`] with respect to every predicted cell.
pub fn loss_gradient(preds: &[DensityMap], gts: &[DensityMap], n: usize, epsilon: f64) -> Result<Vec<DensityMap>> {
    let errors = BatchErrors::new(preds, gts)?;
    let breakdown = evaluate(&errors, n, epsilon, true)?;
    Ok(pml_gradient(&errors, &breakdown, true))
}

// d/d(pred) of log(L2^0 + eps) is 2/B * U(e_0) / (L2^0 + eps). For the
// difference terms, the residual difference has zero block sums, so the
// coarse part of its chain rule vanishes and the gradient of
// ||residual||^2 / B is 2/B * U(residual). The regularizer adds 2/B * e_L.
fn pml_gradient(errors: &BatchErrors, b: &LossBreakdown, regularized: bool) -> Vec<DensityMap> {
    let top = errors.level;
    let scale = 2.0 / errors.items.len() as f64;
    let coarse_coef = scale / (b.l2_per_level[&0] + b.epsilon);
    errors
        .items
        .iter()
        .map(|e| {
            let mut g = if regularized {
                e.levels[top].iter().map(|v| scale * v).collect()
            } else {
                vec![0.0; cells(top)]
            };
            add_upsampled(&mut g, top, &e.levels[0], 0, coarse_coef);
            for (&(c, f), v) in &b.ldiff_per_pair {
                let coef = scale / (v + b.epsilon);
                add_upsampled(&mut g, top, &e.residual(c, f), f, coef);
            }
            DensityMap::from_parts(top, g)
        })
        .collect()
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Progressive loss over `n` sub-levels, optionally with the `L2^L` regularizer.
    Pml { n: usize, regularized: bool },
    /// Plain full-resolution `L2^L`.
    L2,
}

impl LossKind {
    pub fn label(&self) -> String {
        match self {
            LossKind::Pml { n, regularized } => {
                format!("pml_n{n}{}", if *regularized { "_reg" } else { "" })
            }
            LossKind::L2 => "l2".into(),
        }
    }

    pub fn value(&self, preds: &[DensityMap], gts: &[DensityMap], epsilon: f64) -> Result<f64> {
        let errors = BatchErrors::new(preds, gts)?;
        match *self {
            LossKind::Pml { n, regularized } => Ok(evaluate(&errors, n, epsilon, regularized)?.total),
            LossKind::L2 => errors.l2(errors.level),
        }
    }

    pub fn value_and_gradient(
        &self,
        preds: &[DensityMap],
        gts: &[DensityMap],
        epsilon: f64,
    ) -> Result<(f64, Vec<DensityMap>)> {
        let errors = BatchErrors::new(preds, gts)?;
        match *self {
            LossKind::Pml { n, regularized } => {
                let b = evaluate(&errors, n, epsilon, regularized)?;
                let grad = pml_gradient(&errors, &b, regularized);
                Ok((b.total, grad))
            }
            LossKind::L2 => {
                let top = errors.level;
                let scale = 2.0 / errors.items.len() as f64;
                let grad = errors
                    .items
                    .iter()
                    .map(|e| DensityMap::from_parts(top, e.levels[top].iter().map(|v| scale * v).collect()))
                    .collect();
                Ok((errors.l2(top)?, grad))
            }
        }
    }
}
