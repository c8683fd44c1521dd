//! Radflow: recurrent flow decomposition and neighbor attention for
//! forecasting dynamic networks of time series.

pub mod assemble;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{RadflowError, Result};
pub use tensor::Tensor;
