//! Point-forecast metrics: SMAPE, RMSE and MAE, overall and per node, with
//! the optional non-zero-only variant that drops steps whose truth is zero.

use crate::error::{RadflowError, Result};
use crate::train::loss::SMAPE_DELTA;
use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct MetricOptions {
    /// Drop (step, dim) samples whose truth is exactly zero.
    pub nonzero_only: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeMetrics {
    pub node: usize,
    pub smape: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Number of (step, dim) samples that survived filtering.
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub smape: f64,
    pub rmse: f64,
    pub mae: f64,
    pub per_node: Vec<NodeMetrics>,
    /// Total samples pooled into the overall numbers.
    pub samples: usize,
    pub nonzero_only: bool,
}

/// Computes all three metrics over per-node predictions (each F x D, raw
/// scale). Overall values pool every surviving sample, so they equal the
/// count-weighted average of the per-node values.
pub fn compute_metrics(
    nodes: &[usize],
    preds: &[Vec<Vec<f64>>],
    truths: &[Vec<Vec<f64>>],
    options: MetricOptions,
) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != truths.len() || nodes.len() != preds.len() {
        return Err(RadflowError::ShapeMismatch(format!(
            "{} nodes, {} prediction series, {} truth series",
            nodes.len(),
            preds.len(),
            truths.len()
        )));
    }
    let mut per_node = Vec::with_capacity(preds.len());
    let (mut smape_sum, mut sq_sum, mut abs_sum, mut total) = (0.0, 0.0, 0.0, 0usize);
    for ((&node, pred), truth) in nodes.iter().zip(preds).zip(truths) {
        if pred.len() != truth.len() {
            return Err(RadflowError::ShapeMismatch(format!(
                "node {node}: {} prediction steps against {} truth steps",
                pred.len(),
                truth.len()
            )));
        }
        let (mut s, mut sq, mut a, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (p_row, t_row) in pred.iter().zip(truth) {
            if p_row.len() != t_row.len() {
                return Err(RadflowError::ShapeMismatch(format!(
                    "node {node}: prediction dim {} against truth dim {}",
                    p_row.len(),
                    t_row.len()
                )));
            }
            for (&p, &t) in p_row.iter().zip(t_row) {
                if options.nonzero_only && t == 0.0 {
                    continue;
                }
                let err = p - t;
                s += 100.0 * err.abs() / (0.5 * (p.abs() + t.abs()) + SMAPE_DELTA);
                sq += err * err;
                a += err.abs();
                count += 1;
            }
        }
        per_node.push(NodeMetrics {
            node,
            smape: if count > 0 { s / count as f64 } else { 0.0 },
            rmse: if count > 0 { (sq / count as f64).sqrt() } else { 0.0 },
            mae: if count > 0 { a / count as f64 } else { 0.0 },
            count,
        });
        smape_sum += s;
        sq_sum += sq;
        abs_sum += a;
        total += count;
    }
    if total == 0 {
        return Err(RadflowError::Data(
            "no samples survived metric filtering".into(),
        ));
    }
    Ok(MetricReport {
        smape: smape_sum / total as f64,
        rmse: (sq_sum / total as f64).sqrt(),
        mae: abs_sum / total as f64,
        per_node,
        samples: total,
        nonzero_only: options.nonzero_only,
    })
}

/// Popularity bucket per node: floor of log10(1 + mean raw value), clamped
/// at zero, for breakdowns of metrics by node magnitude.
pub fn popularity_bucket(mean_value: f64) -> usize {
    (1.0 + mean_value.max(0.0)).log10().floor().max(0.0) as usize
}
