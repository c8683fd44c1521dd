//! The forecasting model: configuration, parameters, the recurrent block
//! stack, neighbor aggregation and the rollout runner.

pub mod aggregate;
pub mod config;
pub mod params;
pub mod recurrent;
pub mod runner;

pub use aggregate::AttentionTrace;
pub use config::{EmbeddingSource, ModelConfig, Variant};
pub use params::RadflowParams;
pub use runner::{Feedback, ForecastBundle, NeighborSeries, RolloutOptions, SampleInput};
