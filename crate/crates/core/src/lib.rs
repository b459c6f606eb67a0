//! Progressive multi-resolution loss (PML) for density-map regression.
//!
//! * [`pyramid`]: dyadic density maps, sum/average pooling, replicate
//!   upsampling, residual maps.
//! * [`loss`]: per-level L2, difference losses, the alpha re-weighting
//!   system, PML and its analytic gradient.
//! * [`likelihood`]: relative marginal log-likelihood of resolution sets.
//! * [`synth`]: synthetic crowd scenes, a tiny convolutional regressor and
//!   its training loop.
//! * [`eval`]: MAE/RMSE counting metrics and the benchmark/ablation harness.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod likelihood;
pub mod loss;
pub mod pyramid;
pub mod resolution;
pub mod rng;
pub mod sample;
pub mod synth;

pub use error::{PmlError, Result};
pub use loss::{LossBreakdown, LossKind};
pub use pyramid::{DensityMap, PointAnnotations, Pyramid, ResidualMap};
pub use resolution::ResolutionSet;
