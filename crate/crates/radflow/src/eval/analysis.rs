//! Post-hoc analyses: robustness to random deletion of values or edges,
//! counterfactual doubling of a neighbor, the network contribution ratio
//! and attention-versus-correlation records.

use crate::assemble::assemble_eval;
use crate::data::graph::DynamicGraph;
use crate::data::panel::{FilledPanel, SeriesPanel};
use crate::error::{RadflowError, Result};
use crate::eval::evaluate::{evaluate, EvalOptions, Setting};
use crate::eval::stats::pearson;
use crate::model::params::RadflowParams;
use crate::model::runner::{
    from_log, run_sample, to_log, Feedback, ForecastBundle, RolloutOptions,
};
use crate::tape::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const RATIO_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessPoint {
    /// "values" or "edges".
    pub kind: String,
    pub fraction: f64,
    pub smape: f64,
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(RadflowError::InvalidConfig(format!(
                "deletion fraction {f} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Imputation-setting SMAPE after deleting a fraction of observations
/// (masked, then forward-filled) or of edges (removed entirely), each
/// fraction evaluated independently with seeded deletions.
pub fn robustness_sweep(
    params: &RadflowParams,
    panel: &SeriesPanel,
    graph: &DynamicGraph,
    value_fractions: &[f64],
    edge_fractions: &[f64],
    test_start: usize,
    seed: u64,
) -> Result<Vec<RobustnessPoint>> {
    check_fractions(value_fractions)?;
    check_fractions(edge_fractions)?;
    let opts = EvalOptions {
        setting: Setting::Imputation,
        test_start,
        nonzero_only: false,
    };
    let base_filled = FilledPanel::from_panel(panel);
    let mut out = Vec::new();

    for (i, &frac) in value_fractions.iter().enumerate() {
        let filled = if frac == 0.0 {
            base_filled.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64) << 32);
            let mut dropped = panel.clone();
            let cells = panel.n_nodes() * panel.n_steps();
            let k = (frac * cells as f64).round() as usize;
            let mut order: Vec<usize> = (0..cells).collect();
            order.shuffle(&mut rng);
            for &cell in order.iter().take(k) {
                dropped.set_missing(cell / panel.n_steps(), cell % panel.n_steps(), true);
            }
            FilledPanel::from_panel(&dropped)
        };
        let (report, _) = evaluate(params, &filled, graph, &opts, None)?;
        out.push(RobustnessPoint {
            kind: "values".into(),
            fraction: frac,
            smape: report.smape,
        });
    }

    for (i, &frac) in edge_fractions.iter().enumerate() {
        let pruned = if frac == 0.0 {
            graph.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed ^ (i as u64) << 32);
            let mut edges = graph.edges();
            edges.shuffle(&mut rng);
            let keep = edges.len() - (frac * edges.len() as f64).round() as usize;
            edges.truncate(keep);
            DynamicGraph::new(graph.n_nodes(), graph.t_max(), &edges)?
        };
        let (report, _) = evaluate(params, &base_filled, &pruned, &opts, None)?;
        out.push(RobustnessPoint {
            kind: "edges".into(),
            fraction: frac,
            smape: report.smape,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterfactualRecord {
    pub ego: usize,
    pub neighbor: usize,
    /// Horizon step whose neighbor value was doubled.
    pub day: usize,
    pub attention_before: f64,
    pub attention_after: f64,
    /// |after - before| / (|before| + delta) of the ego's raw forecast on
    /// that day, summed over dims.
    pub forecast_rel_change: f64,
}

fn run_eval_sample(
    params: &RadflowParams,
    sample: &crate::model::runner::SampleInput,
) -> Result<(Tape, crate::model::runner::RolloutOutput)> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = run_sample(
        &mut tape,
        params,
        sample,
        RolloutOptions::eval(Feedback::Own),
        &mut rng,
    )?;
    Ok((tape, out))
}

/// Doubles one neighbor's raw value on one horizon day (imputation
/// setting) and reports the attention shift and the relative change of the
/// ego's forecast on that day.
pub fn counterfactual_double(
    params: &RadflowParams,
    panel: &FilledPanel,
    graph: &DynamicGraph,
    ego: usize,
    neighbor: usize,
    day: usize,
    test_start: usize,
) -> Result<CounterfactualRecord> {
    let cfg = &params.config;
    if day >= cfg.horizon {
        return Err(RadflowError::InvalidConfig(format!(
            "day {day} outside the {}-step horizon",
            cfg.horizon
        )));
    }
    let offset = test_start - cfg.backcast;
    let sample = assemble_eval(cfg, panel, graph, ego, offset)?;
    let pos = sample
        .neighbors
        .iter()
        .position(|n| n.id == neighbor && n.present[day])
        .ok_or_else(|| {
            RadflowError::Data(format!(
                "neighbor {neighbor} is not an active selected neighbor of {ego} on day {day}"
            ))
        })?;

    let (tape_a, out_a) = run_eval_sample(params, &sample)?;
    let mut doubled = sample.clone();
    for v in &mut doubled.neighbors[pos].inputs[cfg.backcast + day] {
        *v = to_log(2.0 * from_log(*v));
    }
    let (tape_b, out_b) = run_eval_sample(params, &doubled)?;

    let score = |out: &crate::model::runner::RolloutOutput| -> f64 {
        out.traces[day]
            .as_ref()
            .and_then(|tr| {
                tr.neighbor_ids
                    .iter()
                    .position(|&id| id == neighbor)
                    .map(|i| tr.neighbor_score(i))
            })
            .unwrap_or(0.0)
    };
    let before: Vec<f64> = tape_a
        .value(out_a.forecast_log[day])
        .data()
        .iter()
        .map(|&v| from_log(v))
        .collect();
    let after: Vec<f64> = tape_b
        .value(out_b.forecast_log[day])
        .data()
        .iter()
        .map(|&v| from_log(v))
        .collect();
    let delta: f64 = before
        .iter()
        .zip(&after)
        .map(|(&b, &a)| (a - b).abs())
        .sum();
    let base: f64 = before.iter().map(|&b| b.abs()).sum();

    Ok(CounterfactualRecord {
        ego,
        neighbor,
        day,
        attention_before: score(&out_a),
        attention_after: score(&out_b),
        forecast_rel_change: delta / (base + RATIO_DELTA),
    })
}

/// Mean over the horizon of |net| / (|rec| + |net| + delta), with each
/// term's magnitude taken as the L1 norm of its log-space vector.
pub fn network_contribution(bundle: &ForecastBundle) -> f64 {
    let steps = bundle.recurrent_log.len();
    if steps == 0 {
        return 0.0;
    }
    let l1 = |row: &[f64]| row.iter().map(|v| v.abs()).sum::<f64>();
    let mut acc = 0.0;
    for (rec, net) in bundle.recurrent_log.iter().zip(&bundle.network_log) {
        let r = l1(rec);
        let a = l1(net);
        acc += a / (r + a + RATIO_DELTA);
    }
    acc / steps as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationRecord {
    pub ego: usize,
    pub neighbor: usize,
    /// Pearson correlation of the raw series over the horizon; absent when
    /// either series is constant.
    pub correlation: Option<f64>,
    pub skipped: bool,
    /// Head-averaged attention, averaged over the horizon steps where the
    /// neighbor appears in the trace.
    pub mean_lambda: f64,
}

/// Correlation of each (ego, neighbor) raw series pair over the horizon
/// against the neighbor's average attention score.
pub fn attention_correlation(
    bundles: &[ForecastBundle],
    panel: &FilledPanel,
    test_start: usize,
    horizon: usize,
) -> Vec<CorrelationRecord> {
    let series = |node: usize| -> Vec<f64> {
        (test_start..test_start + horizon)
            .flat_map(|t| panel.raw_at(node, t).to_vec())
            .collect()
    };
    let mut out = Vec::new();
    for bundle in bundles {
        let ego_series = series(bundle.node);
        let mut scores: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for trace in bundle.traces.iter().flatten() {
            for (i, &id) in trace.neighbor_ids.iter().enumerate() {
                let e = scores.entry(id).or_insert((0.0, 0));
                e.0 += trace.neighbor_score(i);
                e.1 += 1;
            }
        }
        for (neighbor, (sum, count)) in scores {
            let corr = pearson(&ego_series, &series(neighbor));
            out.push(CorrelationRecord {
                ego: bundle.node,
                neighbor,
                correlation: corr,
                skipped: corr.is_none(),
                mean_lambda: sum / count as f64,
            });
        }
    }
    out
}
