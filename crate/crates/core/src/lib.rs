//! Hyperspectral image super-resolution with Kolmogorov-Arnold layers.
//!
//! The crate fuses a low-resolution hyperspectral cube with a
//! high-resolution multispectral image of the same scene:
//!
//! - [`autograd`]: a small tape-based reverse-mode AD engine;
//! - [`bspline`]: knot vectors and Cox-de Boor basis evaluation;
//! - [`kan`]: KAN layers (SiLU residual plus learnable spline per edge) and
//!   their activation-sparsity statistics;
//! - [`model`]: the fusion module, KAN channel-attention blocks and the
//!   convolutional restructure head;
//! - [`loss`], [`trainer`]: objective, Adam, step schedule, checkpoints;
//! - [`degradation`], [`metrics`], [`io`]: synthetic data, quality metrics
//!   and file formats.

pub mod autograd;
pub mod bspline;
pub mod degradation;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kan;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod trainer;

pub use autograd::{Gradients, Interpolation, Tape, Tensor, Var};
pub use bspline::{KnotVector, SplineConfig};
pub use error::{Error, Result};
pub use kan::{ActivationStats, KanLayer};
pub use loss::LossConfig;
pub use metrics::MetricReport;
pub use model::{HsrKanModel, ModelConfig};
pub use trainer::{Checkpoint, TrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
