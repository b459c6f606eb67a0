//! Deterministic synthetic crowd scenes.
//!
//! Generation order, all draws from one [`SplitMix64`] seeded with
//! `config.seed`:
//!
//! 1. per cluster: center `x`, center `y` (uniform in the scene), then the
//!    point count, uniform in `points_per_cluster` (inclusive);
//! 2. per point of that cluster: `x = cx + spread * N`, `y = cy + spread * N`,
//!    redrawn together until both fall inside `[0, scene_size)`;
//! 3. observation: each point adds `exp(-d^2 / (2 blob_sigma^2))` at every
//!    cell center within `4 blob_sigma`, then every cell in row-major order
//!    receives `noise_std * N`.
//!
//! The ground truth is the point rasterization at the observation level.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{PmlError, Result};
use crate::io::{format_dmap, format_points, parse_points, read_dmap};
use crate::pyramid::{cells, rasterize, DensityMap, PointAnnotations, MAX_LEVEL};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub scene_size: f64,
    pub num_clusters: usize,
    /// Inclusive `(min, max)` points per cluster.
    pub points_per_cluster: (usize, usize),
    pub cluster_spread: f64,
    /// Observation blur in scene units.
    pub blob_sigma: f64,
    pub noise_std: f64,
    /// Observation and ground-truth level.
    pub obs_level: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene_size: 64.0,
            num_clusters: 4,
            points_per_cluster: (2, 30),
            cluster_spread: 5.0,
            blob_sigma: 1.0,
            noise_std: 0.05,
            obs_level: 6,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PmlError::InvalidArgument(m));
        if !(self.scene_size.is_finite() && self.scene_size > 0.0) {
            return Err(PmlError::InvalidSceneSize(self.scene_size));
        }
        let (lo, hi) = self.points_per_cluster;
        if lo > hi {
            return bad(format!("points_per_cluster range {lo}..{hi} is empty"));
        }
        if !(self.cluster_spread.is_finite() && self.cluster_spread > 0.0) {
            return bad(format!("cluster_spread must be positive, got {}", self.cluster_spread));
        }
        if !(self.blob_sigma.is_finite() && self.blob_sigma > 0.0) {
            return bad(format!("blob_sigma must be positive, got {}", self.blob_sigma));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.obs_level > MAX_LEVEL {
            return Err(PmlError::LevelTooLarge {
                level: self.obs_level,
                max: MAX_LEVEL,
            });
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Single-line `key=value` manifest record.
    pub fn manifest_line(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SceneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seed={} scene_size={:?} num_clusters={} points_per_cluster={}..{} \
             cluster_spread={:?} blob_sigma={:?} noise_std={:?} obs_level={}",
            self.seed,
            self.scene_size,
            self.num_clusters,
            self.points_per_cluster.0,
            self.points_per_cluster.1,
            self.cluster_spread,
            self.blob_sigma,
            self.noise_std,
            self.obs_level
        )
    }
}

/// Parses a scene manifest: blank lines and `#` comments are skipped, the
/// single remaining line holds every config key exactly once.
pub fn parse_manifest(text: &str) -> Result<SceneConfig> {
    let mut found = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if found.is_some() {
            return Err(PmlError::parse(i + 1, "more than one config line"));
        }
        found = Some((i + 1, line));
    }
    let (line_no, line) = found.ok_or_else(|| PmlError::parse(1, "missing config line"))?;
    let err = |m: String| PmlError::parse(line_no, m);

    let mut seed = None;
    let mut scene_size = None;
    let mut num_clusters = None;
    let mut points = None;
    let mut spread = None;
    let mut sigma = None;
    let mut noise = None;
    let mut level = None;
    for field in line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(format!("expected key=value, found {field:?}")))?;
        let float = |v: &str| v.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
        let int = |v: &str| v.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
        let slot_filled = match key {
            "seed" => seed.replace(value.parse::<u64>().map_err(|e| err(format!("seed: {e}")))?),
            "scene_size" => scene_size.replace(float(value)?).map(|_| 0),
            "num_clusters" => num_clusters.replace(int(value)?).map(|_| 0),
            "points_per_cluster" => {
                let (lo, hi) = value
                    .split_once("..")
                    .ok_or_else(|| err(format!("points_per_cluster: expected min..max, found {value:?}")))?;
                points.replace((int(lo)?, int(hi)?)).map(|_| 0)
            }
            "cluster_spread" => spread.replace(float(value)?).map(|_| 0),
            "blob_sigma" => sigma.replace(float(value)?).map(|_| 0),
            "noise_std" => noise.replace(float(value)?).map(|_| 0),
            "obs_level" => level.replace(int(value)?).map(|_| 0),
            other => return Err(err(format!("unknown key {other:?}"))),
        };
        if slot_filled.is_some() {
            return Err(err(format!("duplicate key {key:?}")));
        }
    }
    let missing = |k: &str| err(format!("missing key {k:?}"));
    let cfg = SceneConfig {
        seed: seed.ok_or_else(|| missing("seed"))?,
        scene_size: scene_size.ok_or_else(|| missing("scene_size"))?,
        num_clusters: num_clusters.ok_or_else(|| missing("num_clusters"))?,
        points_per_cluster: points.ok_or_else(|| missing("points_per_cluster"))?,
        cluster_spread: spread.ok_or_else(|| missing("cluster_spread"))?,
        blob_sigma: sigma.ok_or_else(|| missing("blob_sigma"))?,
        noise_std: noise.ok_or_else(|| missing("noise_std"))?,
        obs_level: level.ok_or_else(|| missing("obs_level"))?,
    };
    cfg.validate().map_err(|e| err(e.to_string()))?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub annotations: PointAnnotations,
    pub observation: DensityMap,
    pub gt_map: DensityMap,
}

impl Scene {
    pub fn count(&self) -> usize {
        self.annotations.len()
    }

    /// Writes `manifest.txt`, `points.csv`, `observation.dmap` and `gt.dmap`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.txt"), format!("{}\n", self.config.manifest_line()))?;
        fs::write(dir.join("points.csv"), format_points(&self.annotations))?;
        fs::write(dir.join("observation.dmap"), format_dmap(&self.observation))?;
        fs::write(dir.join("gt.dmap"), format_dmap(&self.gt_map))?;
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Scene> {
        let dir = dir.as_ref();
        let config = parse_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
        let points = parse_points(&fs::read_to_string(dir.join("points.csv"))?)?;
        let annotations = PointAnnotations::new(points, config.scene_size)?;
        let observation = read_dmap(dir.join("observation.dmap"))?;
        let gt_map = read_dmap(dir.join("gt.dmap"))?;
        observation.expect_level(config.obs_level)?;
        gt_map.expect_level(config.obs_level)?;
        gt_map.validate_ground_truth()?;
        Ok(Scene {
            config,
            annotations,
            observation,
            gt_map,
        })
    }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let size = cfg.scene_size;
    let mut points = Vec::new();
    for _ in 0..cfg.num_clusters {
        let cx = rng.uniform() * size;
        let cy = rng.uniform() * size;
        let (lo, hi) = cfg.points_per_cluster;
        let count = lo + rng.below((hi - lo + 1) as u64) as usize;
        for _ in 0..count {
            loop {
                let x = cx + cfg.cluster_spread * rng.normal();
                let y = cy + cfg.cluster_spread * rng.normal();
                if (0.0..size).contains(&x) && (0.0..size).contains(&y) {
                    points.push((x, y));
                    break;
                }
            }
        }
    }
    let annotations = PointAnnotations::new(points, size)?;

    let level = cfg.obs_level;
    let side = 1usize << level;
    let cell = size / side as f64;
    let reach = (4.0 * cfg.blob_sigma / cell).ceil() as isize;
    let inv_two_var = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
    let mut obs = vec![0.0; cells(level)];
    for &(x, y) in annotations.points() {
        let pc = (x / cell) as isize;
        let pr = (y / cell) as isize;
        for r in (pr - reach).max(0)..=(pr + reach).min(side as isize - 1) {
            let dy = (r as f64 + 0.5) * cell - y;
            for c in (pc - reach).max(0)..=(pc + reach).min(side as isize - 1) {
                let dx = (c as f64 + 0.5) * cell - x;
                obs[r as usize * side + c as usize] += (-(dx * dx + dy * dy) * inv_two_var).exp();
            }
        }
    }
    if cfg.noise_std > 0.0 {
        for v in &mut obs {
            *v += cfg.noise_std * rng.normal();
        }
    }
    let observation = DensityMap::new(level, obs)?;
    let gt_map = rasterize(&annotations, level)?;
    Ok(Scene {
        config: *cfg,
        annotations,
        observation,
        gt_map,
    })
}
