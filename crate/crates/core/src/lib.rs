//! Self-attentive ensemble transformer for member-by-member post-processing
//! of gridded ensemble forecasts, with the Direct and PPNN baselines, a
//! Gaussian CRPS objective and the usual verification diagnostics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the width for ordinary use.

pub mod attention;
pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod grid;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod param;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use data_io::{GenParams, NormStats, SampleRecord};
pub use error::{Error, Result};
pub use grid::Grid;
pub use metrics::ScoreReport;
pub use models::{Model, ModelConfig, Prediction, Variant};
pub use param::ParamStore;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{train, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Sample32 = SampleRecord<f32>;
pub type Sample64 = SampleRecord<f64>;

/// Crate version, recorded next to every output.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
