//! Evaluation: metrics, protocols, baselines, significance tests and the
//! robustness/interpretability analyses.

pub mod analysis;
pub mod arnet;
pub mod baselines;
pub mod evaluate;
pub mod metrics;
pub mod stats;

pub use evaluate::{evaluate, EvalOptions, Setting};
pub use metrics::{compute_metrics, MetricOptions, MetricReport, NodeMetrics};
pub use stats::{paired_ttest, pearson, TTestResult};
