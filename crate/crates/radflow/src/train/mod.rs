//! Training: the SMAPE objective, AdamW with the warmup/decay schedule,
//! checkpointing and the batch fit loop.

pub mod checkpoint;
pub mod fit;
pub mod loss;
pub mod optim;

pub use crate::data::panel::forward_fill;
pub use fit::{fit, FitConfig, FitResult, TrainLog};
pub use loss::{smape_loss, smape_value, SMAPE_DELTA};
pub use optim::{AdamW, OptimConfig};
