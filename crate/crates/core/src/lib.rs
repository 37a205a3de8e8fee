//! Zero-temperature test-time adaptation for contrastive vision-language
//! classifiers, operating on precomputed embeddings.
//!
//! The crate is organized bottom-up:
//!
//! - [`math`]: logits, temperature softmax, entropy, marginals, template ensembling.
//! - [`kernel`]: confidence filtering, vote counting and tie-breaking (the ZERO
//!   prediction rule).
//! - [`ensemble`]: binomial majority-vote error model and its oracles.
//! - [`calibration`]: reliability bins, ECE and rank correlation.
//! - [`memlab`]: a toy differentiable text encoder for checking how one step of
//!   marginal entropy minimization moves the marginal's argmax.
//! - [`io`]: the ZTEB embedding format, dataset manifests and evaluation.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` / `f64`). The aliases
//! below fix the scalar to `f64`, which is what the evaluation paths use.

pub mod calibration;
pub mod ensemble;
mod error;
pub mod io;
pub mod kernel;
pub mod math;
pub mod memlab;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use calibration::{CalibrationReport, EceMode, ReliabilityBins};
pub use ensemble::{EnsembleParams, LabelGroupReport, MonteCarloEstimate, RiskLoss};
pub use kernel::{FilterConfig, FilterMask, LimitMode, TieBreakStrategy, ZeroConfig, ZeroResult};
pub use math::{EmbeddingMatrix, Matrix, Temperature};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type EmbeddingMatrix64 = EmbeddingMatrix<f64>;
pub type EmbeddingMatrix32 = EmbeddingMatrix<f32>;
pub type Temperature64 = Temperature<f64>;
pub type FilterConfig64 = FilterConfig<f64>;
pub type ZeroConfig64 = ZeroConfig<f64>;
pub type ZeroConfig32 = ZeroConfig<f32>;
pub type ZeroResult64 = ZeroResult<f64>;
pub type ReliabilityBins64 = ReliabilityBins<f64>;
pub type CalibrationReport64 = CalibrationReport<f64>;
