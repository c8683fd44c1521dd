//! Naive baselines: repeat the final observation, or tile the final week.

use crate::data::panel::FilledPanel;
use crate::error::{RadflowError, Result};

/// Repeats the last observation before `test_start` across the horizon.
pub fn copy_step(
    panel: &FilledPanel,
    node: usize,
    test_start: usize,
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    if test_start == 0 {
        return Err(RadflowError::Data(
            "copy-step needs at least one step of history".into(),
        ));
    }
    let last = panel.raw_at(node, test_start - 1).to_vec();
    Ok(vec![last; horizon])
}

/// Tiles the last `period` observations before `test_start` across the
/// horizon, aligned so step f repeats the value from period steps earlier.
pub fn copy_week(
    panel: &FilledPanel,
    node: usize,
    test_start: usize,
    horizon: usize,
    period: usize,
) -> Result<Vec<Vec<f64>>> {
    if period == 0 || test_start < period {
        return Err(RadflowError::Data(format!(
            "copy-week needs {period} steps of history, have {test_start}"
        )));
    }
    Ok((0..horizon)
        .map(|f| {
            let src = test_start - period + f % period;
            panel.raw_at(node, src).to_vec()
        })
        .collect())
}
