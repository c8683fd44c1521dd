//! The evaluation protocols. Imputation lets the model observe neighbors'
//! true values during the horizon; Forecast replaces them with forecasts
//! from a pretrained no-network model. The ego always feeds back its own
//! predictions.

use crate::assemble::assemble_eval;
use crate::data::graph::DynamicGraph;
use crate::data::panel::FilledPanel;
use crate::error::{RadflowError, Result};
use crate::eval::metrics::{compute_metrics, MetricOptions, MetricReport};
use crate::model::params::RadflowParams;
use crate::model::runner::{
    run_sample, to_log, Feedback, ForecastBundle, NeighborSeries, RolloutOptions,
};
use crate::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Imputation,
    Forecast,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub setting: Setting,
    /// The horizon is [test_start, test_start + F); the backcast window
    /// ends at test_start.
    pub test_start: usize,
    pub nonzero_only: bool,
}

/// Own-feedback forecast of one node with no network term, used to stand in
/// for neighbor truth in the Forecast setting.
fn pure_forecast(
    model: &RadflowParams,
    panel: &FilledPanel,
    node: usize,
    offset: usize,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let sample = crate::model::runner::SampleInput {
        node,
        ego_inputs: panel.log_window(node, offset, offset + cfg.backcast + cfg.horizon),
        neighbors: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = run_sample(
        &mut tape,
        model,
        &sample,
        RolloutOptions {
            feedback: Feedback::Own,
            train: false,
            decompose: false,
        },
        &mut rng,
    )?;
    Ok(out
        .forecast_log
        .iter()
        .map(|&v| {
            tape.value(v)
                .data()
                .iter()
                .map(|&x| crate::model::runner::from_log(x))
                .collect()
        })
        .collect())
}

fn substitute_forecasts(
    series: &mut NeighborSeries,
    cache: &mut Vec<Option<Vec<Vec<f64>>>>,
    model: &RadflowParams,
    panel: &FilledPanel,
    offset: usize,
    backcast: usize,
) -> Result<()> {
    if cache[series.id].is_none() {
        cache[series.id] = Some(pure_forecast(model, panel, series.id, offset)?);
    }
    let fc = cache[series.id].as_ref().unwrap();
    for (f, row) in fc.iter().enumerate() {
        series.inputs[backcast + f] = row.iter().map(|&v| to_log(v)).collect();
    }
    for inner in &mut series.hop2 {
        substitute_forecasts(inner, cache, model, panel, offset, backcast)?;
    }
    Ok(())
}

/// Evaluates every node on the window ending at test_start + F and returns
/// pooled metrics plus the per-node forecast bundles (with decomposition
/// and attention traces).
pub fn evaluate(
    params: &RadflowParams,
    panel: &FilledPanel,
    graph: &DynamicGraph,
    opts: &EvalOptions,
    neighbor_model: Option<&RadflowParams>,
) -> Result<(MetricReport, Vec<ForecastBundle>)> {
    let cfg = &params.config;
    if opts.test_start < cfg.backcast || opts.test_start + cfg.horizon > panel.n_steps() {
        return Err(RadflowError::Data(format!(
            "test window starting at {} does not fit the {}-step panel",
            opts.test_start,
            panel.n_steps()
        )));
    }
    let needs_substitute = opts.setting == Setting::Forecast && cfg.hops > 0;
    if needs_substitute {
        match neighbor_model {
            None => {
                return Err(RadflowError::InvalidConfig(
                    "the forecast setting needs a pretrained no-network model for neighbors"
                        .into(),
                ))
            }
            Some(m) if m.config.hops != 0 => {
                return Err(RadflowError::InvalidConfig(
                    "the neighbor model must be a no-network (hops = 0) configuration".into(),
                ))
            }
            Some(m)
                if m.config.backcast != cfg.backcast
                    || m.config.horizon != cfg.horizon
                    || m.config.dim != cfg.dim =>
            {
                return Err(RadflowError::InvalidConfig(
                    "neighbor model window does not match the evaluated model".into(),
                ))
            }
            _ => {}
        }
    }

    let offset = opts.test_start - cfg.backcast;
    let mut cache: Vec<Option<Vec<Vec<f64>>>> = vec![None; panel.n_nodes()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut nodes = Vec::with_capacity(panel.n_nodes());
    let mut preds = Vec::with_capacity(panel.n_nodes());
    let mut truths = Vec::with_capacity(panel.n_nodes());
    let mut bundles = Vec::with_capacity(panel.n_nodes());
    for node in 0..panel.n_nodes() {
        let mut sample = assemble_eval(cfg, panel, graph, node, offset)?;
        if needs_substitute {
            let model = neighbor_model.unwrap();
            for nb in &mut sample.neighbors {
                substitute_forecasts(nb, &mut cache, model, panel, offset, cfg.backcast)?;
            }
        }
        let mut tape = Tape::new();
        let out = run_sample(
            &mut tape,
            params,
            &sample,
            RolloutOptions::eval(Feedback::Own),
            &mut rng,
        )?;
        let bundle = ForecastBundle::from_rollout(&tape, node, &out, cfg.layers);
        nodes.push(node);
        preds.push(bundle.forecast_raw.clone());
        truths.push(panel.raw_window(node, opts.test_start, opts.test_start + cfg.horizon));
        bundles.push(bundle);
    }
    let report = compute_metrics(
        &nodes,
        &preds,
        &truths,
        MetricOptions {
            nonzero_only: opts.nonzero_only,
        },
    )?;
    Ok((report, bundles))
}
