//! Mask-predict non-autoregressive translation with error-exposure training
//! and consistency regularization, built on a small deterministic autodiff
//! engine.

pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tensor};
