//! Counting metrics and the synthetic benchmark harness.
//!
//! `MAE = mean |est - true|` and `MSE = sqrt(mean (est - true)^2)` over
//! per-image counts. The "MSE" name follows crowd-counting convention: the
//! value is a root-mean-square error.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{PmlError, Result};
use crate::loss::{batch_level, LossKind, DEFAULT_EPSILON};
use crate::rng::derive_seed;
use crate::synth::model::{Architecture, TinyModel};
use crate::synth::scene::SceneConfig;
use crate::synth::train::{scene_set, train, validate_on, AdamConfig, SceneStream, TrainConfig, TrainOutcome};
use crate::DensityMap;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub mae: f64,
    /// Root-mean-square count error.
    pub mse: f64,
    /// `(estimated, true)` count per sample.
    pub per_sample: Vec<(f64, f64)>,
}

pub fn evaluate(preds: &[DensityMap], gts: &[DensityMap]) -> Result<MetricsSummary> {
    batch_level(preds, gts)?;
    let per_sample: Vec<(f64, f64)> = preds.iter().zip(gts).map(|(p, g)| (p.sum(), g.sum())).collect();
    let k = per_sample.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (est, truth) in &per_sample {
        abs += (est - truth).abs();
        sq += (est - truth).powi(2);
    }
    Ok(MetricsSummary {
        mae: abs / k,
        mse: (sq / k).sqrt(),
        per_sample,
    })
}

/// Everything that defines one benchmark training run apart from the loss and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkConfig {
    pub scene: SceneConfig,
    pub hidden: usize,
    pub output_bias: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub scenes_per_epoch: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub epsilon: f64,
    /// Score the checkpoint with the lowest validation MAE instead of the final parameters.
    pub select_best: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            hidden: 4,
            output_bias: -6.0,
            steps: 2000,
            batch: 4,
            lr: 1e-4,
            clip_norm: 10.0,
            scenes_per_epoch: 128,
            val_scenes: 16,
            test_scenes: 200,
            epsilon: DEFAULT_EPSILON,
            select_best: true,
        }
    }
}

// Stream tags for seed derivation.
const STREAM: u64 = 1;
const INIT: u64 = 2;
const VALIDATION: u64 = 3;
const TEST: u64 = 4;
const ORDER: u64 = 5;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub loss: LossKind,
    pub seed: u64,
    pub test: MetricsSummary,
    pub outcome: TrainOutcome,
}

impl BenchmarkConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden: self.hidden,
            level: self.scene.obs_level,
        }
    }

    /// Training stream for a run seed; independent of the loss.
    pub fn stream(&self, seed: u64) -> SceneStream {
        SceneStream {
            base: self.scene.with_seed(derive_seed(seed, &[STREAM])),
            scenes_per_epoch: self.scenes_per_epoch,
        }
    }

    pub fn train_config(&self, loss: LossKind, seed: u64) -> TrainConfig {
        TrainConfig {
            loss,
            steps: self.steps,
            lr: self.lr,
            clip_norm: self.clip_norm,
            batch: self.batch,
            seed: derive_seed(seed, &[ORDER]),
            epsilon: self.epsilon,
            adam: AdamConfig::default(),
        }
    }

    pub fn test_seed(&self, seed: u64) -> u64 {
        derive_seed(seed, &[TEST])
    }

    pub fn initial_model(&self, seed: u64) -> TinyModel {
        TinyModel::init(self.architecture(), derive_seed(seed, &[INIT]), self.output_bias)
    }

    /// The model a finished run is scored with.
    pub fn scored_model<'a>(&self, outcome: &'a TrainOutcome) -> &'a TinyModel {
        match (&outcome.best, self.select_best) {
            (Some(b), true) => &b.model,
            _ => &outcome.model,
        }
    }

    /// Trains a fresh model with `loss` and scores it on the seed's test scenes.
    pub fn run(&self, loss: LossKind, seed: u64) -> Result<RunResult> {
        let validation = scene_set(&self.scene, derive_seed(seed, &[VALIDATION]), self.val_scenes)?;
        let outcome = train(
            self.initial_model(seed),
            &self.stream(seed),
            &validation,
            &self.train_config(loss, seed),
        )?;
        let tests = scene_set(&self.scene, self.test_seed(seed), self.test_scenes)?;
        let test = validate_on(self.scored_model(&outcome), &tests)?;
        Ok(RunResult {
            loss,
            seed,
            test,
            outcome,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub bench: BenchmarkConfig,
    pub base_seed: u64,
    pub n_values: Vec<usize>,
    pub with_reg: Vec<bool>,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRecord {
    pub n: usize,
    pub regularized: bool,
    pub repeat: usize,
    pub mae: f64,
    pub mse: f64,
    pub stream_hash: String,
}

impl AblationRecord {
    pub fn cell_key(&self) -> String {
        cell_key(self.n, self.regularized)
    }
}

fn cell_key(n: usize, regularized: bool) -> String {
    format!("n{n}_{}", if regularized { "reg" } else { "noreg" })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub n: usize,
    pub regularized: bool,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub records: Vec<AblationRecord>,
}

impl AblationTable {
    /// Mean and population standard deviation of MAE per `(n, reg)` cell, in run order.
    pub fn cells(&self) -> Vec<CellSummary> {
        let mut keys: Vec<(usize, bool)> = Vec::new();
        for r in &self.records {
            if !keys.contains(&(r.n, r.regularized)) {
                keys.push((r.n, r.regularized));
            }
        }
        keys.into_iter()
            .map(|(n, regularized)| {
                let rows: Vec<&AblationRecord> = self
                    .records
                    .iter()
                    .filter(|r| r.n == n && r.regularized == regularized)
                    .collect();
                let k = rows.len() as f64;
                let mean_mae = rows.iter().map(|r| r.mae).sum::<f64>() / k;
                let var = rows.iter().map(|r| (r.mae - mean_mae).powi(2)).sum::<f64>() / k;
                CellSummary {
                    n,
                    regularized,
                    mean_mae,
                    std_mae: var.sqrt(),
                    mean_mse: rows.iter().map(|r| r.mse).sum::<f64>() / k,
                }
            })
            .collect()
    }

    /// CSV with columns `cell,repeat,mae,mse`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,repeat,mae,mse\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:.16e},{:.16e}", r.cell_key(), r.repeat, r.mae, r.mse);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{:<6} {:<6} {:>12} {:>12} {:>12}\n", "n", "reg", "mae_mean", "mae_std", "mse_mean");
        for c in self.cells() {
            let _ = writeln!(
                s,
                "{:<6} {:<6} {:>12.4} {:>12.4} {:>12.4}",
                c.n,
                if c.regularized { "yes" } else { "no" },
                c.mean_mae,
                c.std_mae,
                c.mean_mse
            );
        }
        s
    }
}

/// Trains one model per `(n, reg, repeat)`; repeat `r` of every cell sees the
/// same scene stream, seeded from `(base_seed, r)`.
pub fn ablation_run(cfg: &AblationConfig) -> Result<AblationTable> {
    if cfg.repeats == 0 || cfg.n_values.is_empty() || cfg.with_reg.is_empty() {
        return Err(PmlError::InvalidArgument(
            "ablation needs at least one n value, one regularizer setting and one repeat".into(),
        ));
    }
    let top = cfg.bench.scene.obs_level;
    if let Some(n) = cfg.n_values.iter().find(|&&n| n > top) {
        return Err(PmlError::InvalidArgument(format!(
            "n = {n} exceeds the prediction level {top}"
        )));
    }
    let mut jobs = Vec::new();
    for &n in &cfg.n_values {
        for &regularized in &cfg.with_reg {
            for repeat in 0..cfg.repeats {
                jobs.push((n, regularized, repeat));
            }
        }
    }
    let records = jobs
        .into_par_iter()
        .map(|(n, regularized, repeat)| {
            let seed = derive_seed(cfg.base_seed, &[repeat as u64]);
            let run = cfg.bench.run(LossKind::Pml { n, regularized }, seed)?;
            Ok(AblationRecord {
                n,
                regularized,
                repeat,
                mae: run.test.mae,
                mse: run.test.mse,
                stream_hash: run.outcome.stream_hash,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(counts: &[f64]) -> Vec<DensityMap> {
        counts.iter().map(|&c| DensityMap::new(0, vec![c]).unwrap()).collect()
    }

    #[test]
    fn perfect_predictions() {
        let m = evaluate(&maps(&[3.0, 4.0]), &maps(&[3.0, 4.0])).unwrap();
        assert_eq!((m.mae, m.mse), (0.0, 0.0));
    }

    #[test]
    fn two_sample_example() {
        let m = evaluate(&maps(&[10.0, 12.0]), &maps(&[11.0, 11.0])).unwrap();
        assert_eq!((m.mae, m.mse), (1.0, 1.0));
        assert_eq!(m.per_sample, vec![(10.0, 11.0), (12.0, 11.0)]);
    }

    #[test]
    fn single_sample_collapses() {
        let m = evaluate(&maps(&[7.5]), &maps(&[5.0])).unwrap();
        assert_eq!((m.mae, m.mse), (2.5, 2.5));
    }

    #[test]
    fn counts_use_map_sums() {
        let p = DensityMap::new(1, vec![0.5, 0.5, 1.0, 1.0]).unwrap();
        let g = DensityMap::new(1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let m = evaluate(&[p], &[g]).unwrap();
        assert_eq!(m.mae, 1.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(evaluate(&[], &[]), Err(PmlError::EmptyBatch)));
    }

    #[test]
    fn ablation_rejects_bad_grids() {
        let base = AblationConfig {
            bench: BenchmarkConfig::default(),
            base_seed: 0,
            n_values: vec![7],
            with_reg: vec![true],
            repeats: 1,
        };
        assert!(ablation_run(&base).is_err());
        assert!(ablation_run(&AblationConfig { repeats: 0, ..base.clone() }).is_err());
        assert!(ablation_run(&AblationConfig { with_reg: vec![], ..base }).is_err());
    }

    #[test]
    fn cell_statistics() {
        let rec = |repeat, mae| AblationRecord {
            n: 2,
            regularized: true,
            repeat,
            mae,
            mse: mae,
            stream_hash: String::new(),
        };
        let t = AblationTable {
            records: vec![rec(0, 1.0), rec(1, 3.0)],
        };
        let c = &t.cells()[0];
        assert_eq!((c.mean_mae, c.std_mae), (2.0, 1.0));
        assert!(t.to_csv().contains("n2_reg,1,"));
    }
}
