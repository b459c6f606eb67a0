//! Marginal log-likelihood of a resolution set with the variances at their
//! optimum, and the empirical check that the dense set `{0..n_k} ∪ {L}`
//! never scores below a sparse set with the same `n_k`.
//!
//! All values omit the localization term `E log p(y | y_{2^n_k}, x)`,
//! so they are relative log-likelihoods: only comparisons between sets
//! that share `n_k` are meaningful.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{PmlError, Result};
use crate::loss::{batch_level, l2_level, l_diff, LevelStats};
use crate::pyramid::{cells, DensityMap};
use crate::resolution::ResolutionSet;
use crate::rng::{derive_seed, SplitMix64};
use crate::sample::random_batch;

/// One additive contribution to the relative log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodTerm {
    /// `None` for the coarsest-level term.
    pub coarse: Option<usize>,
    pub fine: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodReport {
    pub resolution_set: ResolutionSet,
    /// Relative log-likelihood (localization term excluded).
    pub loglik: f64,
    pub terms: Vec<LikelihoodTerm>,
    pub constant_part: f64,
}

/// `-(2 pi - 1) / 2 * 4^n_k`.
fn constant_part(nk: usize) -> f64 {
    -((-1.0 + 2.0 * PI) / 2.0) * cells(nk) as f64
}

fn check_set(levels: &ResolutionSet, prediction_level: usize) -> Result<()> {
    if levels.len() < 2 {
        return Err(PmlError::InvalidResolutionSet(
            "need at least one sub-level below the prediction level".into(),
        ));
    }
    if levels.prediction_level() > prediction_level {
        return Err(PmlError::InvalidResolutionSet(format!(
            "set {levels} exceeds prediction level {prediction_level}"
        )));
    }
    Ok(())
}

/// Relative log-likelihood of `levels` with optimal variances:
///
/// `C(n_k) - 1/2 sum_j (4^n_j - 4^n_{j-1}) log(4^n_j ldiff(n_{j-1}, n_j) / (4^n_j - 4^n_{j-1}))
///  - 1/2 4^n_0 log L2^n_0`,
///
/// with `epsilon` added to every log argument.
pub fn log_likelihood(
    preds: &[DensityMap],
    gts: &[DensityMap],
    levels: &ResolutionSet,
    epsilon: f64,
) -> Result<LikelihoodReport> {
    check_set(levels, batch_level(preds, gts)?)?;
    let stats = LevelStats::compute(preds, gts, levels)?;
    likelihood_from_stats(&stats, levels, epsilon)
}

pub fn likelihood_from_stats(
    stats: &LevelStats,
    levels: &ResolutionSet,
    epsilon: f64,
) -> Result<LikelihoodReport> {
    if levels.len() < 2 {
        return Err(PmlError::InvalidResolutionSet(
            "need at least one sub-level below the prediction level".into(),
        ));
    }
    let sub = levels.sub_levels();
    let n0 = sub[0];
    let nk = sub[sub.len() - 1];
    let mut terms = Vec::with_capacity(sub.len());
    terms.push(LikelihoodTerm {
        coarse: None,
        fine: n0,
        value: -0.5 * cells(n0) as f64 * (stats.l2(n0)? + epsilon).ln(),
    });
    for w in sub.windows(2) {
        let (a, b) = (w[0], w[1]);
        let gap = (cells(b) - cells(a)) as f64;
        let arg = cells(b) as f64 * stats.ldiff(a, b)? / gap;
        terms.push(LikelihoodTerm {
            coarse: Some(a),
            fine: b,
            value: -0.5 * gap * (arg + epsilon).ln(),
        });
    }
    let constant = constant_part(nk);
    let mut loglik = constant;
    for t in &terms {
        loglik += t.value;
    }
    Ok(LikelihoodReport {
        resolution_set: levels.clone(),
        loglik,
        terms,
        constant_part: constant,
    })
}

/// The dense-set form for `{0, ..., n} ∪ {L}`:
/// `C(n) - 1/2 sum_{j=1..n} (4^j - 4^(j-1)) log(4/3 ldiff(j-1, j)) - 1/2 log L2^0`.
pub fn special_case_likelihood(
    preds: &[DensityMap],
    gts: &[DensityMap],
    n: usize,
    epsilon: f64,
) -> Result<LikelihoodReport> {
    let top = batch_level(preds, gts)?;
    if n >= top {
        return Err(PmlError::InvalidArgument(format!(
            "n = {n} must be below the prediction level {top}"
        )));
    }
    let mut terms = vec![LikelihoodTerm {
        coarse: None,
        fine: 0,
        value: -0.5 * (l2_level(preds, gts, 0)? + epsilon).ln(),
    }];
    for j in 1..=n {
        let gap = (cells(j) - cells(j - 1)) as f64;
        terms.push(LikelihoodTerm {
            coarse: Some(j - 1),
            fine: j,
            value: -0.5 * gap * (4.0 / 3.0 * l_diff(preds, gts, j)? + epsilon).ln(),
        });
    }
    let constant = constant_part(n);
    let loglik = constant + terms.iter().map(|t| t.value).sum::<f64>();
    Ok(LikelihoodReport {
        resolution_set: ResolutionSet::dense(n, top)?,
        loglik,
        terms,
        constant_part: constant,
    })
}

/// Variance-dependent marginal log-likelihood for explicit variances
/// (localization term excluded):
///
/// `-1/2 sum_j [ ldiff_j / s_j + (4^n_j - 4^n_{j-1}) log(2 pi s_j) + (n_j - n_{j-1}) 4^n_{j-1} log 4 ]
///  - 1/2 [ L2^n_0 / s_0 + 4^n_0 log(2 pi s_0) ]`
///
/// where `s_j` is `sigma_sq[j]` over the sub-level chain of `levels`.
pub fn sigma_log_likelihood(
    stats: &LevelStats,
    levels: &ResolutionSet,
    sigma_sq: &BTreeMap<usize, f64>,
) -> Result<f64> {
    let sub = levels.sub_levels();
    if sub.is_empty() {
        return Err(PmlError::InvalidResolutionSet("no sub-levels".into()));
    }
    let sigma = |j: usize| -> Result<f64> {
        match sigma_sq.get(&j) {
            Some(&s) if s > 0.0 => Ok(s),
            _ => Err(PmlError::InvalidArgument(format!(
                "missing or non-positive variance for index {j}"
            ))),
        }
    };
    let n0 = sub[0];
    let s0 = sigma(0)?;
    let mut value = -0.5 * (stats.l2(n0)? / s0 + cells(n0) as f64 * (2.0 * PI * s0).ln());
    for (j, w) in sub.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let s = sigma(j + 1)?;
        let gap = (cells(b) - cells(a)) as f64;
        let shift = (b - a) as f64 * cells(a) as f64 * 4f64.ln();
        value -= 0.5 * (stats.ldiff(a, b)? / s + gap * (2.0 * PI * s).ln() + shift);
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremConfig {
    pub trials: usize,
    pub seed: u64,
    /// Prediction level `L`.
    pub level: usize,
    /// Largest sub-level shared by both sets.
    pub nk: usize,
    /// Maps per random batch.
    pub batch: usize,
    pub epsilon: f64,
    /// A trial is a violation when the dense set scores below the sparse
    /// one by more than this.
    pub slack: f64,
}

impl TheoremConfig {
    pub fn new(trials: usize, seed: u64, level: usize, nk: usize) -> Self {
        Self {
            trials,
            seed,
            level,
            nk,
            batch: 2,
            epsilon: crate::loss::DEFAULT_EPSILON,
            slack: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremTrial {
    pub trial: usize,
    pub sparse_set: ResolutionSet,
    pub loglik_sparse: f64,
    pub loglik_dense: f64,
    /// `loglik_dense - loglik_sparse`.
    pub diff: f64,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub config: TheoremConfig,
    pub trials: Vec<TheoremTrial>,
    pub violations: usize,
}

impl TheoremReport {
    /// CSV with columns `trial,loglik_N,loglik_Nprime,diff,violated`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial,loglik_N,loglik_Nprime,diff,violated\n");
        for t in &self.trials {
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{}",
                t.trial, t.loglik_sparse, t.loglik_dense, t.diff, t.violated as u8
            );
        }
        s
    }
}

/// Compares a random sparse set against `{0..n_k} ∪ {L}` on fresh random
/// batches; trial `t` is seeded from `(seed, t)`.
pub fn verify_theorem(cfg: &TheoremConfig) -> Result<TheoremReport> {
    if cfg.trials == 0 {
        return Err(PmlError::InvalidArgument("need at least one trial".into()));
    }
    if !(0 < cfg.nk && cfg.nk < cfg.level) {
        return Err(PmlError::InvalidArgument(format!(
            "need 0 < nk < level, got nk = {} and level = {}",
            cfg.nk, cfg.level
        )));
    }
    if cfg.batch == 0 {
        return Err(PmlError::EmptyBatch);
    }
    let dense = ResolutionSet::dense(cfg.nk, cfg.level)?;
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[t as u64]));
            let (preds, gts) = random_batch(&mut rng, cfg.level, cfg.batch);
            let mut levels: Vec<usize> = (0..cfg.nk).filter(|_| rng.uniform() < 0.5).collect();
            levels.extend([cfg.nk, cfg.level]);
            let sparse = ResolutionSet::new(levels)?;
            compare_sets(t, &preds, &gts, sparse, &dense, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let violations = trials.iter().filter(|t| t.violated).count();
    Ok(TheoremReport {
        config: *cfg,
        trials,
        violations,
    })
}

fn compare_sets(
    trial: usize,
    preds: &[DensityMap],
    gts: &[DensityMap],
    sparse: ResolutionSet,
    dense: &ResolutionSet,
    cfg: &TheoremConfig,
) -> Result<TheoremTrial> {
    let loglik_sparse = log_likelihood(preds, gts, &sparse, cfg.epsilon)?.loglik;
    let loglik_dense = log_likelihood(preds, gts, dense, cfg.epsilon)?.loglik;
    let diff = loglik_dense - loglik_sparse;
    Ok(TheoremTrial {
        trial,
        sparse_set: sparse,
        loglik_sparse,
        loglik_dense,
        diff,
        violated: diff < -cfg.slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{optimal_sigma, DEFAULT_EPSILON};
    use crate::pyramid::downsample_sum;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    // From-scratch evaluation: pool both maps, form residuals by hand,
    // assemble the printed expression term by term.
    fn oracle(preds: &[DensityMap], gts: &[DensityMap], sub: &[usize], eps: f64) -> f64 {
        let b = preds.len() as f64;
        let pooled = |m: &DensityMap, l: usize| downsample_sum(m, l).unwrap().into_data();
        let l2 = |l: usize| -> f64 {
            preds
                .iter()
                .zip(gts)
                .map(|(p, g)| pooled(p, l).iter().zip(pooled(g, l)).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                .sum::<f64>()
                / b
        };
        let ldiff = |a: usize, f: usize| -> f64 {
            let side_f = 1usize << f;
            let k = 1usize << (f - a);
            let spread = 0.25f64.powi((f - a) as i32);
            let mut total = 0.0;
            for (p, g) in preds.iter().zip(gts) {
                let (pf, pa, gf, ga) = (pooled(p, f), pooled(p, a), pooled(g, f), pooled(g, a));
                for r in 0..side_f {
                    for c in 0..side_f {
                        let ci = (r / k) * (1 << a) + c / k;
                        let rp = pf[r * side_f + c] - spread * pa[ci];
                        let rg = gf[r * side_f + c] - spread * ga[ci];
                        total += (rp - rg).powi(2);
                    }
                }
            }
            total / b
        };
        let nk = *sub.last().unwrap();
        let mut v = -((2.0 * PI - 1.0) / 2.0) * 4f64.powi(nk as i32);
        for w in sub.windows(2) {
            let (a, f) = (w[0], w[1]);
            let gap = 4f64.powi(f as i32) - 4f64.powi(a as i32);
            v -= 0.5 * gap * (4f64.powi(f as i32) * ldiff(a, f) / gap + eps).ln();
        }
        v - 0.5 * 4f64.powi(sub[0] as i32) * (l2(sub[0]) + eps).ln()
    }

    #[test]
    fn two_level_set_reduces_to_constant_and_coarse_term() {
        let mut rng = SplitMix64::new(11);
        let (p, g) = random_batch(&mut rng, 4, 2);
        let set = ResolutionSet::new(vec![0, 4]).unwrap();
        let r = log_likelihood(&p, &g, &set, DEFAULT_EPSILON).unwrap();
        let expected = -((2.0 * PI - 1.0) / 2.0) - 0.5 * (l2_level(&p, &g, 0).unwrap() + DEFAULT_EPSILON).ln();
        assert!(rel(r.loglik, expected) < 1e-14);
        assert_eq!(r.terms.len(), 1);
    }

    #[test]
    fn matches_from_scratch_oracle() {
        let mut rng = SplitMix64::new(12);
        for sub in [vec![0, 2], vec![1, 3], vec![0, 1, 2, 3], vec![2]] {
            let (p, g) = random_batch(&mut rng, 4, 3);
            let mut levels = sub.clone();
            levels.push(4);
            let set = ResolutionSet::new(levels).unwrap();
            let got = log_likelihood(&p, &g, &set, DEFAULT_EPSILON).unwrap().loglik;
            let want = oracle(&p, &g, &sub, DEFAULT_EPSILON);
            assert!(rel(got, want) < 1e-10, "{sub:?}: {got} vs {want}");
        }
    }

    #[test]
    fn special_case_equals_general_form() {
        let mut rng = SplitMix64::new(13);
        for n in 0..=5 {
            let (p, g) = random_batch(&mut rng, 6, 2);
            let special = special_case_likelihood(&p, &g, n, DEFAULT_EPSILON).unwrap();
            let general = log_likelihood(&p, &g, &ResolutionSet::dense(n, 6).unwrap(), DEFAULT_EPSILON).unwrap();
            assert!(rel(special.loglik, general.loglik) < 1e-10);
        }
        let (p, g) = random_batch(&mut rng, 3, 1);
        assert!(special_case_likelihood(&p, &g, 3, DEFAULT_EPSILON).is_err());
    }

    #[test]
    fn identical_sets_give_zero_difference() {
        let mut rng = SplitMix64::new(14);
        let (p, g) = random_batch(&mut rng, 5, 2);
        let dense = ResolutionSet::dense(3, 5).unwrap();
        let cfg = TheoremConfig::new(1, 0, 5, 3);
        let t = compare_sets(0, &p, &g, dense.clone(), &dense, &cfg).unwrap();
        assert_eq!(t.diff, 0.0);
    }

    #[test]
    fn dense_beats_single_sparse_level() {
        let mut rng = SplitMix64::new(15);
        for _ in 0..50 {
            let (p, g) = random_batch(&mut rng, 5, 2);
            let sparse = log_likelihood(&p, &g, &ResolutionSet::new(vec![3, 5]).unwrap(), DEFAULT_EPSILON).unwrap();
            let dense = log_likelihood(&p, &g, &ResolutionSet::dense(3, 5).unwrap(), DEFAULT_EPSILON).unwrap();
            assert!(dense.loglik >= sparse.loglik - 1e-9);
        }
    }

    #[test]
    fn optimum_is_stationary() {
        let mut rng = SplitMix64::new(16);
        let (p, g) = random_batch(&mut rng, 5, 2);
        let set = ResolutionSet::new(vec![0, 2, 3, 5]).unwrap();
        let stats = LevelStats::compute(&p, &g, &set).unwrap();
        let best = optimal_sigma(&stats, &set, DEFAULT_EPSILON).unwrap().sigma_sq;
        let at_best = sigma_log_likelihood(&stats, &set, &best).unwrap();
        for j in 0..3 {
            for f in [0.9, 0.99, 1.01, 1.1] {
                let mut s = best.clone();
                *s.get_mut(&j).unwrap() *= f;
                assert!(sigma_log_likelihood(&stats, &set, &s).unwrap() <= at_best);
            }
        }
    }

    #[test]
    fn verify_rejects_bad_parameters() {
        assert!(verify_theorem(&TheoremConfig::new(0, 1, 5, 3)).is_err());
        assert!(verify_theorem(&TheoremConfig::new(1, 1, 5, 0)).is_err());
        assert!(verify_theorem(&TheoremConfig::new(1, 1, 5, 5)).is_err());
    }

    #[test]
    fn verify_small_run_has_no_violations() {
        let report = verify_theorem(&TheoremConfig::new(50, 42, 5, 3)).unwrap();
        assert_eq!(report.violations, 0);
        assert_eq!(report.trials.len(), 50);
        assert!(report.to_csv().starts_with("trial,loglik_N,loglik_Nprime,diff,violated\n0,"));
    }
}
