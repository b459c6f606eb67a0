//! Two-stage 3x3 convolutional density regressor with manual backprop.
//!
//! `obs -> conv3x3 (1 -> hidden) -> softplus -> conv3x3 (hidden -> 1) -> softplus`,
//! zero padding, same-size output. Parameters are one flat vector laid out as
//! `[w1 (hidden x 9), b1 (hidden), w2 (hidden x 9), b2]`, kernels row-major
//! over `(dy, dx)` in `-1..=1`.

use crate::error::{PmlError, Result};
use crate::pyramid::{cells, DensityMap};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub hidden: usize,
    /// Input and output level.
    pub level: usize,
}

impl Architecture {
    pub fn num_params(&self) -> usize {
        9 * self.hidden + self.hidden + 9 * self.hidden + 1
    }

    fn w1(&self) -> std::ops::Range<usize> {
        0..9 * self.hidden
    }

    fn b1(&self) -> std::ops::Range<usize> {
        9 * self.hidden..10 * self.hidden
    }

    fn w2(&self) -> std::ops::Range<usize> {
        10 * self.hidden..19 * self.hidden
    }

    fn b2(&self) -> usize {
        19 * self.hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyModel {
    arch: Architecture,
    params: Vec<f64>,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out += conv3x3(input, kernel)` with zero padding.
fn conv_accumulate(input: &[f64], side: usize, kernel: &[f64], out: &mut [f64]) {
    for (t, &k) in kernel.iter().enumerate() {
        if k == 0.0 {
            continue;
        }
        let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
        let (r0, r1) = valid_range(dy, side);
        let (c0, c1) = valid_range(dx, side);
        for r in r0..r1 {
            let src = ((r as isize + dy) as usize) * side;
            let o = &mut out[r * side + c0..r * side + c1];
            let i = &input[(src as isize + c0 as isize + dx) as usize..(src as isize + c1 as isize + dx) as usize];
            for (ov, iv) in o.iter_mut().zip(i) {
                *ov += k * iv;
            }
        }
    }
}

/// Output rows/cols whose `offset` neighbour is inside the grid.
fn valid_range(offset: isize, side: usize) -> (usize, usize) {
    match offset {
        -1 => (1, side),
        1 => (0, side - 1),
        _ => (0, side),
    }
}

/// Adds `d loss / d kernel` into `kgrad` and, when given, `d loss / d input` into `igrad`.
fn conv_backward(
    input: &[f64],
    side: usize,
    kernel: &[f64],
    gout: &[f64],
    kgrad: &mut [f64],
    mut igrad: Option<&mut [f64]>,
) {
    for t in 0..9 {
        let (dy, dx) = (t as isize / 3 - 1, t as isize % 3 - 1);
        let (r0, r1) = valid_range(dy, side);
        let (c0, c1) = valid_range(dx, side);
        let mut acc = 0.0;
        for r in r0..r1 {
            let src = ((r as isize + dy) as usize) * side;
            let lo = (src as isize + c0 as isize + dx) as usize;
            let hi = (src as isize + c1 as isize + dx) as usize;
            let g = &gout[r * side + c0..r * side + c1];
            acc += g.iter().zip(&input[lo..hi]).map(|(a, b)| a * b).sum::<f64>();
            if let Some(ig) = igrad.as_deref_mut() {
                let k = kernel[t];
                for (iv, gv) in ig[lo..hi].iter_mut().zip(g) {
                    *iv += k * gv;
                }
            }
        }
        kgrad[t] += acc;
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre1: Vec<f64>,
    hidden: Vec<f64>,
    pre2: Vec<f64>,
    pub output: DensityMap,
}

impl TinyModel {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            params: vec![0.0; arch.num_params()],
        }
    }

    /// Uniform fan-in scaled weights, zero hidden biases and the given output bias.
    pub fn init(arch: Architecture, seed: u64, output_bias: f64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut m = Self::zeros(arch);
        let a1 = 1.0 / 3.0;
        let a2 = 1.0 / (9.0 * arch.hidden as f64).sqrt();
        for i in arch.w1() {
            m.params[i] = rng.uniform_range(-a1, a1);
        }
        for i in arch.w2() {
            m.params[i] = rng.uniform_range(-a2, a2);
        }
        m.params[arch.b2()] = output_bias;
        m
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(PmlError::InvalidArgument(format!(
                "architecture needs {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, observation: &DensityMap) -> Result<DensityMap> {
        Ok(self.forward_cached(observation)?.output)
    }

    /// Output before the final softplus.
    pub fn pre_activation(&self, observation: &DensityMap) -> Result<Vec<f64>> {
        Ok(self.forward_cached(observation)?.pre2)
    }

    pub fn forward_cached(&self, observation: &DensityMap) -> Result<ForwardCache> {
        observation.expect_level(self.arch.level)?;
        let side = observation.side();
        let n = cells(self.arch.level);
        let h = self.arch.hidden;
        let input = observation.data().to_vec();
        let w1 = &self.params[self.arch.w1()];
        let b1 = &self.params[self.arch.b1()];
        let w2 = &self.params[self.arch.w2()];

        let mut pre1 = vec![0.0; h * n];
        let mut hidden = vec![0.0; h * n];
        let mut pre2 = vec![self.params[self.arch.b2()]; n];
        for c in 0..h {
            let p = &mut pre1[c * n..(c + 1) * n];
            p.fill(b1[c]);
            conv_accumulate(&input, side, &w1[c * 9..c * 9 + 9], p);
            for (hv, pv) in hidden[c * n..(c + 1) * n].iter_mut().zip(p.iter()) {
                *hv = softplus(*pv);
            }
            conv_accumulate(&hidden[c * n..(c + 1) * n], side, &w2[c * 9..c * 9 + 9], &mut pre2);
        }
        let output = DensityMap::new(self.arch.level, pre2.iter().map(|&v| softplus(v)).collect())?;
        Ok(ForwardCache {
            input,
            pre1,
            hidden,
            pre2,
            output,
        })
    }

    /// Adds the parameter gradient for `d loss / d output = grad_out` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DensityMap, grad: &mut [f64]) -> Result<()> {
        grad_out.expect_level(self.arch.level)?;
        if grad.len() != self.params.len() {
            return Err(PmlError::InvalidArgument("gradient buffer has the wrong length".into()));
        }
        let side = 1usize << self.arch.level;
        let n = cells(self.arch.level);
        let h = self.arch.hidden;
        let (w1r, b1r, w2r, b2i) = (self.arch.w1(), self.arch.b1(), self.arch.w2(), self.arch.b2());

        let gpre2: Vec<f64> = grad_out
            .data()
            .iter()
            .zip(&cache.pre2)
            .map(|(g, p)| g * sigmoid(*p))
            .collect();
        grad[b2i] += gpre2.iter().sum::<f64>();

        let mut ghidden = vec![0.0; n];
        for c in 0..h {
            ghidden.fill(0.0);
            let w2 = &self.params[w2r.start + c * 9..w2r.start + c * 9 + 9];
            conv_backward(
                &cache.hidden[c * n..(c + 1) * n],
                side,
                w2,
                &gpre2,
                &mut grad[w2r.start + c * 9..w2r.start + c * 9 + 9],
                Some(&mut ghidden),
            );
            let gpre1: Vec<f64> = ghidden
                .iter()
                .zip(&cache.pre1[c * n..(c + 1) * n])
                .map(|(g, p)| g * sigmoid(*p))
                .collect();
            grad[b1r.start + c] += gpre1.iter().sum::<f64>();
            let w1 = &self.params[w1r.start + c * 9..w1r.start + c * 9 + 9];
            conv_backward(
                &cache.input,
                side,
                w1,
                &gpre1,
                &mut grad[w1r.start + c * 9..w1r.start + c * 9 + 9],
                None,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::sample::random_map;

    const ARCH: Architecture = Architecture { hidden: 3, level: 3 };

    #[test]
    fn zero_parameters_give_softplus_of_zero() {
        let mut rng = SplitMix64::new(1);
        let obs = random_map(&mut rng, 3, -1.0, 1.0);
        let out = TinyModel::zeros(ARCH).forward(&obs).unwrap();
        assert!(out.data().iter().all(|&v| v == 2f64.ln()));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let obs = DensityMap::zeros(4).unwrap();
        assert!(TinyModel::zeros(ARCH).forward(&obs).is_err());
        assert!(TinyModel::from_params(ARCH, vec![0.0; 3]).is_err());
    }

    #[test]
    fn outputs_are_non_negative() {
        let mut rng = SplitMix64::new(2);
        for s in 0..20 {
            let mut m = TinyModel::init(ARCH, s, -3.0);
            for p in m.params_mut() {
                *p *= 5.0;
            }
            let obs = random_map(&mut rng, 3, -5.0, 5.0);
            assert!(m.forward(&obs).unwrap().data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn interior_is_translation_equivariant() {
        let arch = Architecture { hidden: 4, level: 4 };
        let m = TinyModel::init(arch, 5, -1.0);
        let mut rng = SplitMix64::new(3);
        let obs = random_map(&mut rng, 4, 0.0, 1.0);
        let side = 16;
        let mut shifted = vec![0.0; side * side];
        for r in 0..side {
            for c in 1..side {
                shifted[r * side + c] = obs.get(r, c - 1);
            }
        }
        let shifted = DensityMap::new(4, shifted).unwrap();
        let a = m.pre_activation(&obs).unwrap();
        let b = m.pre_activation(&shifted).unwrap();
        // Receptive field is 5x5, so stay two cells away from every border.
        for r in 2..side - 2 {
            for c in 3..side - 2 {
                assert!((b[r * side + c] - a[r * side + c - 1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(4);
        for trial in 0..10 {
            let m = TinyModel::init(ARCH, 100 + trial, rng.uniform_range(-2.0, 0.5));
            let obs = random_map(&mut rng, 3, 0.0, 2.0);
            let target = random_map(&mut rng, 3, 0.0, 1.0);
            // loss = sum(target * output), so d loss / d output = target
            let loss = |p: &[f64]| -> Result<f64> {
                let out = TinyModel::from_params(ARCH, p.to_vec())?.forward(&obs)?;
                out.dot(&target)
            };
            let cache = m.forward_cached(&obs).unwrap();
            let mut analytic = vec![0.0; ARCH.num_params()];
            m.backward(&cache, &target, &mut analytic).unwrap();
            let numeric = central_difference(loss, m.params(), 1e-6).unwrap();
            let (err, _) = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }
}
