//! Mini-batch training of [`TinyModel`] with Adam and global norm clipping.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{PmlError, Result};
use crate::eval::{evaluate, MetricsSummary};
use crate::loss::{LossKind, DEFAULT_EPSILON, DEFAULT_N};
use crate::rng::{derive_seed, SplitMix64};
use crate::synth::model::TinyModel;
use crate::synth::scene::{generate_scene, Scene, SceneConfig};
use crate::DensityMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            lr,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Rescales `grads` to norm `max_norm` when their L2 norm exceeds it.
/// Returns the norm before clipping and whether clipping happened.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> (f64, bool) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Training scenes, regenerated each epoch from an epoch-indexed seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneStream {
    pub base: SceneConfig,
    pub scenes_per_epoch: usize,
}

impl SceneStream {
    pub fn scene_config(&self, epoch: usize, index: usize) -> SceneConfig {
        self.base
            .with_seed(derive_seed(self.base.seed, &[epoch as u64, index as u64]))
    }

    pub fn epoch(&self, epoch: usize) -> Result<Vec<Scene>> {
        (0..self.scenes_per_epoch)
            .map(|i| generate_scene(&self.scene_config(epoch, i)))
            .collect()
    }
}

/// A fixed, seeded set of scenes (validation or test).
pub fn scene_set(base: &SceneConfig, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(&base.with_seed(derive_seed(seed, &[i as u64]))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub batch: usize,
    /// Seeds the per-epoch batch order.
    pub seed: u64,
    pub epsilon: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Pml {
                n: DEFAULT_N,
                regularized: true,
            },
            steps: 2000,
            lr: 1e-4,
            clip_norm: 10.0,
            batch: 4,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// Validation metrics, present on the last step of each epoch.
    pub validation: Option<MetricsSummary>,
}

/// Snapshot of the model at its lowest validation MAE so far.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub val_mae: f64,
    pub model: TinyModel,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub model: TinyModel,
    /// Best validated model; `None` when no validation ran.
    pub best: Option<Checkpoint>,
    pub trace: Vec<StepRecord>,
    /// SHA-256 over the manifest line and points of every training scene, in order.
    pub stream_hash: String,
}

impl TrainOutcome {
    /// CSV with columns `step,loss,grad_norm,clipped,val_mae,val_mse`;
    /// validation columns are empty on steps without validation.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,loss,grad_norm,clipped,val_mae,val_mse\n");
        for r in &self.trace {
            let _ = write!(s, "{},{:.16e},{:.16e},{},", r.step, r.loss, r.grad_norm, r.clipped as u8);
            match &r.validation {
                Some(v) => {
                    let _ = writeln!(s, "{:.16e},{:.16e}", v.mae, v.mse);
                }
                None => s.push_str(",\n"),
            }
        }
        s
    }
}

pub fn predict(model: &TinyModel, scenes: &[Scene]) -> Result<Vec<DensityMap>> {
    scenes.iter().map(|s| model.forward(&s.observation)).collect()
}

pub fn validate_on(model: &TinyModel, scenes: &[Scene]) -> Result<MetricsSummary> {
    let preds = predict(model, scenes)?;
    let gts: Vec<DensityMap> = scenes.iter().map(|s| s.gt_map.clone()).collect();
    evaluate(&preds, &gts)
}

pub fn train(
    mut model: TinyModel,
    stream: &SceneStream,
    validation: &[Scene],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Err(PmlError::InvalidArgument("need at least one step".into()));
    }
    if cfg.batch == 0 || stream.scenes_per_epoch == 0 || stream.scenes_per_epoch % cfg.batch != 0 {
        return Err(PmlError::InvalidArgument(format!(
            "scenes per epoch ({}) must be a positive multiple of the batch size ({})",
            stream.scenes_per_epoch, cfg.batch
        )));
    }
    if !(cfg.lr >= 0.0 && cfg.clip_norm > 0.0) {
        return Err(PmlError::InvalidArgument(format!(
            "need lr >= 0 and clip_norm > 0, got {} and {}",
            cfg.lr, cfg.clip_norm
        )));
    }
    if stream.base.obs_level != model.architecture().level {
        return Err(PmlError::LevelMismatch {
            expected: model.architecture().level,
            found: stream.base.obs_level,
        });
    }
    let steps_per_epoch = stream.scenes_per_epoch / cfg.batch;
    let mut adam = Adam::new(model.params().len(), cfg.lr, cfg.adam);
    let mut hasher = Sha256::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut scenes = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut grad = vec![0.0; model.params().len()];
    let mut best: Option<Checkpoint> = None;

    for step in 0..cfg.steps {
        let epoch = step / steps_per_epoch;
        let slot = step % steps_per_epoch;
        if slot == 0 {
            scenes = stream.epoch(epoch)?;
            for s in &scenes {
                hasher.update(s.config.manifest_line().as_bytes());
                for (x, y) in s.annotations.points() {
                    hasher.update(x.to_le_bytes());
                    hasher.update(y.to_le_bytes());
                }
            }
            order = (0..scenes.len()).collect();
            SplitMix64::new(derive_seed(cfg.seed, &[epoch as u64])).shuffle(&mut order);
        }
        let batch: Vec<&Scene> = order[slot * cfg.batch..(slot + 1) * cfg.batch]
            .iter()
            .map(|&i| &scenes[i])
            .collect();
        let caches = batch
            .iter()
            .map(|s| model.forward_cached(&s.observation))
            .collect::<Result<Vec<_>>>()?;
        let preds: Vec<DensityMap> = caches.iter().map(|c| c.output.clone()).collect();
        let gts: Vec<DensityMap> = batch.iter().map(|s| s.gt_map.clone()).collect();
        let (loss, out_grads) = cfg.loss.value_and_gradient(&preds, &gts, cfg.epsilon)?;
        if !loss.is_finite() {
            return Err(PmlError::Diverged {
                step,
                loss,
                parameters: model.params().to_vec(),
            });
        }
        grad.fill(0.0);
        for (cache, g) in caches.iter().zip(&out_grads) {
            model.backward(cache, g, &mut grad)?;
        }
        let (grad_norm, clipped) = clip_global_norm(&mut grad, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(PmlError::Diverged {
                step,
                loss: grad_norm,
                parameters: model.params().to_vec(),
            });
        }
        adam.step(model.params_mut(), &grad);

        let validation = if slot + 1 == steps_per_epoch && !validation.is_empty() {
            Some(validate_on(&model, validation)?)
        } else {
            None
        };
        if let Some(v) = &validation {
            if best.as_ref().map_or(true, |b| v.mae < b.val_mae) {
                best = Some(Checkpoint {
                    step,
                    val_mae: v.mae,
                    model: model.clone(),
                });
            }
        }
        trace.push(StepRecord {
            step,
            loss,
            grad_norm,
            clipped,
            validation,
        });
    }
    let stream_hash = hasher
        .finalize()
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
    Ok(TrainOutcome {
        model,
        best,
        trace,
        stream_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::model::Architecture;

    fn small_stream() -> SceneStream {
        SceneStream {
            base: SceneConfig {
                seed: 5,
                scene_size: 16.0,
                num_clusters: 2,
                points_per_cluster: (2, 6),
                cluster_spread: 2.0,
                obs_level: 4,
                ..SceneConfig::default()
            },
            scenes_per_epoch: 8,
        }
    }

    fn small_cfg(loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            steps: 12,
            lr: 1e-3,
            batch: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut g = vec![15.0, 20.0];
        let (norm, clipped) = clip_global_norm(&mut g, 10.0);
        assert_eq!(norm, 25.0);
        assert!(clipped);
        assert_eq!(g, vec![15.0 * 0.4, 20.0 * 0.4]);
        let mut small = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut small, 10.0), (5.0, false));
        assert_eq!(small, vec![3.0, 4.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut adam = Adam::new(2, 0.1, AdamConfig::default());
        adam.step(&mut p, &[0.5, -2.0]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let stream = small_stream();
        let arch = Architecture { hidden: 2, level: 4 };
        let model = TinyModel::init(arch, 1, -2.0);
        let val = scene_set(&stream.base, 77, 4).unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            ..small_cfg(LossKind::L2)
        };
        let out = train(model.clone(), &stream, &val, &cfg).unwrap();
        assert_eq!(out.model.params(), model.params());
        let vals: Vec<f64> = out.trace.iter().filter_map(|r| r.validation.as_ref().map(|v| v.mae)).collect();
        assert_eq!(vals.len(), 3);
        assert!(vals.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_deterministic() {
        let stream = small_stream();
        let arch = Architecture { hidden: 2, level: 4 };
        let val = scene_set(&stream.base, 77, 4).unwrap();
        let cfg = small_cfg(LossKind::Pml { n: 2, regularized: true });
        let a = train(TinyModel::init(arch, 1, -2.0), &stream, &val, &cfg).unwrap();
        let b = train(TinyModel::init(arch, 1, -2.0), &stream, &val, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.trace_csv(), b.trace_csv());
        assert_eq!(a.stream_hash, b.stream_hash);
    }

    #[test]
    fn stream_hash_ignores_loss_kind() {
        let stream = small_stream();
        let arch = Architecture { hidden: 2, level: 4 };
        let a = train(TinyModel::init(arch, 1, -2.0), &stream, &[], &small_cfg(LossKind::L2)).unwrap();
        let b = train(
            TinyModel::init(arch, 1, -2.0),
            &stream,
            &[],
            &small_cfg(LossKind::Pml { n: 1, regularized: false }),
        )
        .unwrap();
        assert_eq!(a.stream_hash, b.stream_hash);
        assert_ne!(a.model.params(), b.model.params());
    }

    #[test]
    fn rejects_bad_configs() {
        let stream = small_stream();
        let arch = Architecture { hidden: 2, level: 4 };
        let m = TinyModel::init(arch, 1, -2.0);
        assert!(train(m.clone(), &stream, &[], &TrainConfig { steps: 0, ..small_cfg(LossKind::L2) }).is_err());
        assert!(train(m.clone(), &stream, &[], &TrainConfig { batch: 3, ..small_cfg(LossKind::L2) }).is_err());
        let wrong = TinyModel::init(Architecture { hidden: 2, level: 3 }, 1, -2.0);
        assert!(train(wrong, &stream, &[], &small_cfg(LossKind::L2)).is_err());
    }

    #[test]
    fn divergence_reports_snapshot() {
        let stream = small_stream();
        let arch = Architecture { hidden: 2, level: 4 };
        let mut m = TinyModel::init(arch, 1, -2.0);
        let b2 = m.params().len() - 1;
        m.params_mut()[b2] = 1e200;
        match train(m, &stream, &[], &small_cfg(LossKind::L2)) {
            Err(PmlError::Diverged { step, parameters, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(parameters[b2], 1e200);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_layout() {
        let stream = small_stream();
        let arch = Architecture { hidden: 2, level: 4 };
        let val = scene_set(&stream.base, 77, 2).unwrap();
        let out = train(TinyModel::init(arch, 1, -2.0), &stream, &val, &small_cfg(LossKind::L2)).unwrap();
        let csv = out.trace_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss,grad_norm,clipped,val_mae,val_mse");
        assert_eq!(lines.len(), 13);
        assert!(lines[1].ends_with(",,"));
        assert!(!lines[4].ends_with(",,"));
    }
}
