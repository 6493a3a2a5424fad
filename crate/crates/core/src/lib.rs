//! Low-complexity acoustic scene classification.
//!
//! The crate covers the whole pipeline: a log-Mel [`frontend`], a small
//! NHWC kernel set with exact backward passes ([`nn`]), the Conv-Sep and
//! Conv-mixer networks ([`model`]), the training protocol ([`train`]),
//! parameter/MAC accounting against the 128K / 30M budgets ([`audit`]),
//! post-training INT8 quantization ([`quant`]), audio and metadata
//! ingestion ([`dataset`]) and scoring ([`metrics`]).

pub mod audit;
pub mod dataset;
pub mod error;
pub mod frontend;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
