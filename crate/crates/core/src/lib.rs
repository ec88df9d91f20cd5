//! Local-ensemble extrapolation scores for small multilayer perceptrons.
//!
//! A trained model's training-loss Hessian is probed with exact
//! Hessian-vector products; Lanczos iteration recovers its top-`m`
//! eigenvectors, and a test point is scored by the norm of its prediction
//! gradient after projecting those high-curvature directions out.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod mlp;
pub mod score;
pub mod spectral;
pub mod train;

pub use autodiff::{
    hvp, loss, loss_gradient, predict, prediction_gradient, OutputSelect, Reduction,
};
pub use error::{Error, Result};
pub use mlp::{init_params, Activation, Batch, Head, MlpSpec, ParamVector};
pub use spectral::{HvpOperator, SpectralBasis, TridiagonalFactor};
pub use train::{TrainConfig, TrainedModel};
