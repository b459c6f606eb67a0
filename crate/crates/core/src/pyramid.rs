//! Dyadic density maps and the pyramid operators.
//!
//! A map at level `l` is a `2^l x 2^l` grid stored row-major with
//! `(row, col) = (y, x)`. Coarsening by sum pooling preserves the total
//! count; average pooling and replicate upsampling are the `D` and `U`
//! operators used by the residual construction. For `l1 < l2`,
//! `upsample_replicate` from `l1` to `l2` is the adjoint of
//! `downsample_sum` from `l2` to `l1`, which is what the gradient code uses.

use crate::error::{PmlError, Result};
use crate::resolution::ResolutionSet;

/// Largest level accepted anywhere (a 8192 x 8192 grid).
pub const MAX_LEVEL: usize = 13;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    level: usize,
    data: Vec<f64>,
}

impl DensityMap {
    pub fn new(level: usize, data: Vec<f64>) -> Result<Self> {
        check_level(level)?;
        let expected = cells(level);
        if data.len() != expected {
            return Err(PmlError::DataLength {
                level,
                expected,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(PmlError::NonFinite { index });
        }
        Ok(Self { level, data })
    }

    pub fn zeros(level: usize) -> Result<Self> {
        Self::filled(level, 0.0)
    }

    pub fn filled(level: usize, value: f64) -> Result<Self> {
        check_level(level)?;
        Self::new(level, vec![value; cells(level)])
    }

    /// Internal constructor for data produced by the operators themselves.
    pub(crate) fn from_parts(level: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), cells(level));
        Self { level, data }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Side length in cells, `2^level`.
    pub fn side(&self) -> usize {
        1 << self.level
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side() + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &DensityMap) -> Result<f64> {
        self.expect_level(other.level)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scaled(&self, factor: f64) -> DensityMap {
        Self::from_parts(self.level, self.data.iter().map(|v| v * factor).collect())
    }

    pub fn sub(&self, other: &DensityMap) -> Result<DensityMap> {
        self.expect_level(other.level)?;
        Ok(Self::from_parts(
            self.level,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Checks the extra ground-truth invariant (all entries non-negative).
    pub fn validate_ground_truth(&self) -> Result<()> {
        match self.data.iter().position(|&v| v < 0.0) {
            Some(index) => Err(PmlError::NegativeDensity {
                index,
                value: self.data[index],
            }),
            None => Ok(()),
        }
    }

    pub(crate) fn expect_level(&self, level: usize) -> Result<()> {
        if self.level != level {
            return Err(PmlError::LevelMismatch {
                expected: level,
                found: self.level,
            });
        }
        Ok(())
    }
}

pub(crate) fn cells(level: usize) -> usize {
    1usize << (2 * level)
}

fn check_level(level: usize) -> Result<()> {
    if level > MAX_LEVEL {
        return Err(PmlError::LevelTooLarge {
            level,
            max: MAX_LEVEL,
        });
    }
    Ok(())
}

/// Point annotations in the square scene `[0, scene_size)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAnnotations {
    points: Vec<(f64, f64)>,
    scene_size: f64,
}

impl PointAnnotations {
    pub fn new(points: Vec<(f64, f64)>, scene_size: f64) -> Result<Self> {
        if !(scene_size.is_finite() && scene_size > 0.0) {
            return Err(PmlError::InvalidSceneSize(scene_size));
        }
        let inside = |v: f64| v >= 0.0 && v < scene_size;
        if let Some(index) = points.iter().position(|&(x, y)| !(inside(x) && inside(y))) {
            let (x, y) = points[index];
            return Err(PmlError::PointOutOfBounds {
                index,
                x,
                y,
                scene_size,
            });
        }
        Ok(Self { points, scene_size })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn scene_size(&self) -> f64 {
        self.scene_size
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Grid cell holding scene coordinate `v` under half-open cells `[a, b)`.
pub(crate) fn cell_index(v: f64, scene_size: f64, side: usize) -> usize {
    ((v / scene_size * side as f64).floor() as usize).min(side - 1)
}

/// Counts points per cell of the uniform `2^level` partition of the scene.
pub fn rasterize(ann: &PointAnnotations, level: usize) -> Result<DensityMap> {
    let mut map = DensityMap::zeros(level)?;
    let side = map.side();
    for &(x, y) in ann.points() {
        let col = cell_index(x, ann.scene_size(), side);
        let row = cell_index(y, ann.scene_size(), side);
        map.data[row * side + col] += 1.0;
    }
    Ok(map)
}

/// Sum pooling: each output cell is the sum of its `4^(level - target)` source cells.
pub fn downsample_sum(m: &DensityMap, target_level: usize) -> Result<DensityMap> {
    if target_level > m.level {
        return Err(PmlError::LevelOrder {
            from: m.level,
            to: target_level,
        });
    }
    if target_level == m.level {
        return Ok(m.clone());
    }
    let factor = 1usize << (m.level - target_level);
    let src_side = m.side();
    let dst_side = 1usize << target_level;
    let mut out = vec![0.0; dst_side * dst_side];
    for r in 0..dst_side {
        for c in 0..dst_side {
            let mut acc = 0.0;
            for rr in r * factor..(r + 1) * factor {
                let row = &m.data[rr * src_side + c * factor..rr * src_side + (c + 1) * factor];
                acc += row.iter().sum::<f64>();
            }
            out[r * dst_side + c] = acc;
        }
    }
    Ok(DensityMap::from_parts(target_level, out))
}

/// Average pooling, the `D` operator.
pub fn downsample_avg(m: &DensityMap, target_level: usize) -> Result<DensityMap> {
    let summed = downsample_sum(m, target_level)?;
    let block = cells(m.level - target_level) as f64;
    Ok(DensityMap::from_parts(
        target_level,
        summed.data.into_iter().map(|v| v / block).collect(),
    ))
}

/// Replication upsampling, the `U` operator.
pub fn upsample_replicate(m: &DensityMap, target_level: usize) -> Result<DensityMap> {
    if target_level < m.level {
        return Err(PmlError::LevelOrder {
            from: m.level,
            to: target_level,
        });
    }
    check_level(target_level)?;
    if target_level == m.level {
        return Ok(m.clone());
    }
    let factor = 1usize << (target_level - m.level);
    let src_side = m.side();
    let dst_side = 1usize << target_level;
    let mut out = vec![0.0; dst_side * dst_side];
    for (r, dst_row) in out.chunks_exact_mut(dst_side).enumerate() {
        let src_row = &m.data[(r / factor) * src_side..(r / factor + 1) * src_side];
        for (c, v) in dst_row.iter_mut().enumerate() {
            *v = src_row[c / factor];
        }
    }
    Ok(DensityMap::from_parts(target_level, out))
}

/// Fine map minus the coarse map spread uniformly over its descendant cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    fine_level: usize,
    coarse_level: usize,
    map: DensityMap,
}

impl ResidualMap {
    pub fn fine_level(&self) -> usize {
        self.fine_level
    }

    pub fn coarse_level(&self) -> usize {
        self.coarse_level
    }

    pub fn map(&self) -> &DensityMap {
        &self.map
    }

    pub fn data(&self) -> &[f64] {
        self.map.data()
    }
}

/// `fine - 4^(coarse.level - fine.level) * U(coarse, fine.level)`.
pub fn residual(fine: &DensityMap, coarse: &DensityMap) -> Result<ResidualMap> {
    if coarse.level >= fine.level {
        return Err(PmlError::LevelOrder {
            from: coarse.level,
            to: fine.level,
        });
    }
    let spread = 1.0 / cells(fine.level - coarse.level) as f64;
    let up = upsample_replicate(coarse, fine.level)?;
    let data = fine
        .data
        .iter()
        .zip(&up.data)
        .map(|(f, u)| f - spread * u)
        .collect();
    Ok(ResidualMap {
        fine_level: fine.level,
        coarse_level: coarse.level,
        map: DensityMap::from_parts(fine.level, data),
    })
}

/// Sum-pooled copies of one map at each level of a resolution set.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    maps: Vec<DensityMap>,
}

impl Pyramid {
    /// Maps in increasing level order.
    pub fn maps(&self) -> &[DensityMap] {
        &self.maps
    }

    pub fn at_level(&self, level: usize) -> Option<&DensityMap> {
        self.maps.iter().find(|m| m.level == level)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

pub fn build_pyramid(m: &DensityMap, levels: &ResolutionSet) -> Result<Pyramid> {
    if levels.prediction_level() > m.level {
        return Err(PmlError::LevelOrder {
            from: m.level,
            to: levels.prediction_level(),
        });
    }
    // Coarsen from the finest requested level downwards so each map is
    // pooled from its nearest finer neighbour.
    let mut maps = Vec::with_capacity(levels.len());
    let mut current = m.clone();
    for &level in levels.levels().iter().rev() {
        current = downsample_sum(&current, level)?;
        maps.push(current.clone());
    }
    maps.reverse();
    Ok(Pyramid { maps })
}

/// Halves the resolution by 2x2 sum pooling.
pub(crate) fn halve(data: &[f64], level: usize) -> Vec<f64> {
    let side = 1usize << level;
    let half = side / 2;
    let mut out = vec![0.0; half * half];
    for r in 0..half {
        let top = &data[2 * r * side..(2 * r + 1) * side];
        let bottom = &data[(2 * r + 1) * side..(2 * r + 2) * side];
        for c in 0..half {
            out[r * half + c] = top[2 * c] + top[2 * c + 1] + bottom[2 * c] + bottom[2 * c + 1];
        }
    }
    out
}

/// Adds `coef * U(src, level + delta)` into `dst`.
pub(crate) fn add_upsampled(dst: &mut [f64], dst_level: usize, src: &[f64], src_level: usize, coef: f64) {
    let factor = 1usize << (dst_level - src_level);
    let src_side = 1usize << src_level;
    let dst_side = 1usize << dst_level;
    for (r, dst_row) in dst.chunks_exact_mut(dst_side).enumerate() {
        let src_row = &src[(r / factor) * src_side..(r / factor + 1) * src_side];
        for (c, v) in dst_row.iter_mut().enumerate() {
            *v += coef * src_row[c / factor];
        }
    }
}
