//! The training objective: symmetric mean absolute percentage error on the
//! raw scale, differentiable through the inverse log transform.

use crate::error::{RadflowError, Result};
use crate::tape::{Tape, Var};

pub const SMAPE_DELTA: f64 = 1e-8;

/// SMAPE between log-space forecast vectors and raw-scale truth, one Var
/// per horizon step. The forecast passes through expm1 without the zero
/// clamp so gradients survive negative log-space predictions.
pub fn smape_loss(tape: &mut Tape, forecast_log: &[Var], truth_raw: &[Vec<f64>]) -> Result<Var> {
    if forecast_log.len() != truth_raw.len() || forecast_log.is_empty() {
        return Err(RadflowError::ShapeMismatch(format!(
            "{} forecast steps against {} truth steps",
            forecast_log.len(),
            truth_raw.len()
        )));
    }
    let mut terms = Vec::with_capacity(forecast_log.len());
    for (&pred_log, truth) in forecast_log.iter().zip(truth_raw) {
        if tape.value(pred_log).len() != truth.len() {
            return Err(RadflowError::ShapeMismatch(format!(
                "forecast dim {} against truth dim {}",
                tape.value(pred_log).len(),
                truth.len()
            )));
        }
        let pred = tape.expm1(pred_log);
        let t = tape.leaf_vec(truth.clone());
        let diff = tape.sub(pred, t)?;
        let abs_diff = tape.abs(diff);
        let num = tape.scale(abs_diff, 100.0);
        let abs_t = tape.abs(t);
        let abs_p = tape.abs(pred);
        let mag = tape.add(abs_t, abs_p)?;
        let half = tape.scale(mag, 0.5);
        let den = tape.add_const(half, SMAPE_DELTA);
        terms.push(tape.div(num, den)?);
    }
    let all = tape.concat(&terms);
    Ok(tape.mean(all))
}

/// Plain (non-tape) SMAPE between raw predictions and raw truth, the same
/// formula used by the loss.
pub fn smape_value(pred_raw: &[Vec<f64>], truth_raw: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p_row, t_row) in pred_raw.iter().zip(truth_raw) {
        for (&p, &t) in p_row.iter().zip(t_row) {
            sum += 100.0 * (p - t).abs() / (0.5 * (p.abs() + t.abs()) + SMAPE_DELTA);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
