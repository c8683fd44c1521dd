//! Autoregressive rollout: warms the stack over the backcast window, then
//! produces the F-step forecast, combining the recurrent term with the
//! network term from neighbor aggregation.

use crate::error::{RadflowError, Result};
use crate::model::aggregate::{aggregate_attention, aggregate_mean, combine_ego, network_term, AttentionTrace};
use crate::model::config::Variant;
use crate::model::params::RadflowParams;
use crate::model::recurrent::{project_input, recurrent_forecast, stack_step, StackState};
use crate::tape::{Tape, Var};
use rand::Rng;

/// log1p transform applied to raw observations before the model sees them.
pub fn to_log(raw: f64) -> f64 {
    raw.max(0.0).ln_1p()
}

/// Inverse transform back to the raw scale, clamped below at zero.
pub fn from_log(log: f64) -> f64 {
    log.exp_m1().max(0.0)
}

/// What feeds the ego input during the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    /// Each prediction is fed back as the next input (Forecast setting).
    Own,
    /// Ground truth is fed (used to embed neighbors, and in Imputation).
    Teacher,
}

/// One neighbor's input series plus its per-horizon-step presence. For
/// two-hop runs each neighbor carries its own sampled neighbors.
#[derive(Debug, Clone)]
pub struct NeighborSeries {
    pub id: usize,
    /// Log-space inputs aligned with the ego window, length backcast + horizon.
    pub inputs: Vec<Vec<f64>>,
    /// Active in the graph at horizon step f.
    pub present: Vec<bool>,
    pub hop2: Vec<NeighborSeries>,
}

#[derive(Debug, Clone)]
pub struct SampleInput {
    pub node: usize,
    /// Log-space ego inputs; at least the backcast window, plus the horizon
    /// when teacher feedback is used.
    pub ego_inputs: Vec<Vec<f64>>,
    pub neighbors: Vec<NeighborSeries>,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    pub feedback: Feedback,
    pub train: bool,
    /// Also compute per-layer forecast contributions.
    pub decompose: bool,
}

impl RolloutOptions {
    pub fn eval(feedback: Feedback) -> Self {
        RolloutOptions {
            feedback,
            train: false,
            decompose: true,
        }
    }

    pub fn train() -> Self {
        RolloutOptions {
            feedback: Feedback::Own,
            train: true,
            decompose: false,
        }
    }
}

/// Tape handles for everything a rollout produced.
pub struct RolloutOutput {
    /// Final forecast v̂ per horizon step, log space.
    pub forecast_log: Vec<Var>,
    /// Recurrent term v̂^R per horizon step.
    pub recurrent_log: Vec<Var>,
    /// Network term v̂^A per horizon step; `None` when no neighbor was
    /// present (the aggregation is skipped entirely).
    pub network_log: Vec<Option<Var>>,
    /// Per horizon step, the L per-layer contributions W^R q^ℓ.
    pub per_layer: Vec<Vec<Var>>,
    pub traces: Vec<Option<AttentionTrace>>,
    /// Ego node embedding at each forecast production step.
    pub embeds: Vec<Var>,
}

/// Runs the recurrent stack over a series in teacher mode and returns the
/// node embeddings at the requested step indices.
fn embed_series<R: Rng>(
    tape: &mut Tape,
    params: &RadflowParams,
    inputs: &[Vec<f64>],
    indices: std::ops::Range<usize>,
    train: bool,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let mut state = StackState::zeros(tape, &params.config);
    let mut out = Vec::with_capacity(indices.len());
    for (t, obs) in inputs.iter().enumerate().take(indices.end) {
        let x = tape.leaf_vec(obs.clone());
        let z1 = project_input(tape, params, x)?;
        let step = stack_step(tape, params, z1, &mut state, train, rng)?;
        if indices.contains(&t) {
            out.push(step.embed);
        }
    }
    Ok(out)
}

/// Embeddings used as keys/values for the ego's aggregation, one per
/// horizon step. At two hops, each 1-hop embedding is replaced by its own
/// ego-combination over its sampled neighbors.
fn neighbor_embeddings<R: Rng>(
    tape: &mut Tape,
    params: &RadflowParams,
    neighbor: &NeighborSeries,
    horizon: usize,
    backcast: usize,
    two_hop: bool,
    train: bool,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let needed = backcast..backcast + horizon;
    if neighbor.inputs.len() < needed.end {
        return Err(RadflowError::Data(format!(
            "neighbor {} series shorter than the window",
            neighbor.id
        )));
    }
    let own = embed_series(tape, params, &neighbor.inputs, needed, train, rng)?;
    if !two_hop {
        return Ok(own);
    }

    let mut hop2_embeds = Vec::with_capacity(neighbor.hop2.len());
    for n2 in &neighbor.hop2 {
        let e = neighbor_embeddings(tape, params, n2, horizon, backcast, false, train, rng)?;
        hop2_embeds.push(e);
    }

    let cfg = &params.config;
    let mut out = Vec::with_capacity(horizon);
    for (f, &embed) in own.iter().enumerate() {
        let active: Vec<(usize, Var)> = neighbor
            .hop2
            .iter()
            .zip(&hop2_embeds)
            .filter(|(n2, _)| n2.present[f])
            .map(|(n2, e)| (n2.id, e[f]))
            .collect();
        // An empty inner neighborhood degrades to the ego-only combination.
        let aggregated = if active.is_empty() {
            tape.zeros(cfg.aggregate_dim())
        } else {
            match cfg.variant {
                Variant::Attention => {
                    aggregate_attention(tape, params, embed, &active, true)?.0
                }
                Variant::GraphSage | Variant::MeanPool => {
                    aggregate_mean(tape, cfg.aggregate_dim(), &active)?
                }
            }
        };
        out.push(combine_ego(tape, params, embed, aggregated)?);
    }
    Ok(out)
}

/// Full forward pass for one ego window.
pub fn run_sample<R: Rng>(
    tape: &mut Tape,
    params: &RadflowParams,
    sample: &SampleInput,
    opts: RolloutOptions,
    rng: &mut R,
) -> Result<RolloutOutput> {
    let cfg = &params.config;
    let (b, f_len) = (cfg.backcast, cfg.horizon);
    if sample.ego_inputs.is_empty() {
        return Err(RadflowError::Data("empty ego series".into()));
    }
    let consume = b + f_len - 1;
    if sample.ego_inputs.len() < b
        || (opts.feedback == Feedback::Teacher && sample.ego_inputs.len() < consume)
    {
        return Err(RadflowError::Data(format!(
            "ego series of {} steps shorter than the window",
            sample.ego_inputs.len()
        )));
    }

    // Neighbor stacks run first, in declaration order, so the dropout
    // stream is identical regardless of horizon content.
    let mut neighbor_embeds: Vec<Vec<Var>> = Vec::with_capacity(sample.neighbors.len());
    if cfg.hops > 0 {
        for n in &sample.neighbors {
            neighbor_embeds.push(neighbor_embeddings(
                tape,
                params,
                n,
                f_len,
                b,
                cfg.hops == 2,
                opts.train,
                rng,
            )?);
        }
    }

    let mut state = StackState::zeros(tape, cfg);
    let mut out = RolloutOutput {
        forecast_log: Vec::with_capacity(f_len),
        recurrent_log: Vec::with_capacity(f_len),
        network_log: Vec::with_capacity(f_len),
        per_layer: Vec::with_capacity(f_len),
        traces: Vec::with_capacity(f_len),
        embeds: Vec::with_capacity(f_len),
    };
    let mut fed_back: Option<Var> = None;

    for t in 0..consume {
        let x = if t < b || opts.feedback == Feedback::Teacher {
            tape.leaf_vec(sample.ego_inputs[t].clone())
        } else {
            fed_back.expect("own feedback available after the first forecast")
        };
        let z1 = project_input(tape, params, x)?;
        let step = stack_step(tape, params, z1, &mut state, opts.train, rng)?;

        if t + 1 >= b {
            let f = t + 1 - b;
            let v_rec = recurrent_forecast(tape, params, step.forecast_sum)?;
            let mut per_layer = Vec::new();
            if opts.decompose {
                let w = tape.param(&params.store, params.w_output);
                for &q in &step.per_layer_forecast {
                    per_layer.push(tape.linear(w, q, None)?);
                }
            }

            let active: Vec<(usize, Var)> = sample
                .neighbors
                .iter()
                .enumerate()
                .filter(|(_, n)| cfg.hops > 0 && n.present[f])
                .map(|(i, n)| (n.id, neighbor_embeds[i][f]))
                .collect();
            let (v_net, trace) = if active.is_empty() {
                (None, None)
            } else {
                let (v, tr) = network_term(tape, params, step.embed, &active)?;
                (Some(v), tr)
            };

            let v_hat = match v_net {
                Some(v) => tape.add(v_rec, v)?,
                None => v_rec,
            };
            // Feed back the clamped log-space prediction: log1p of the
            // raw forecast floored at zero.
            fed_back = Some(tape.relu(v_hat));

            out.forecast_log.push(v_hat);
            out.recurrent_log.push(v_rec);
            out.network_log.push(v_net);
            out.per_layer.push(per_layer);
            out.traces.push(trace);
            out.embeds.push(step.embed);
        }
    }
    Ok(out)
}

/// Concrete (non-tape) forecasts and decomposition for one node.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ForecastBundle {
    pub node: usize,
    /// F x D final forecast, log space.
    pub forecast_log: Vec<Vec<f64>>,
    pub recurrent_log: Vec<Vec<f64>>,
    /// Network term; all-zero rows where aggregation was skipped.
    pub network_log: Vec<Vec<f64>>,
    /// L x F x D per-layer contributions to the recurrent term.
    pub per_layer_log: Vec<Vec<Vec<f64>>>,
    /// F x D raw-scale forecast after the inverse transform.
    pub forecast_raw: Vec<Vec<f64>>,
    pub traces: Vec<Option<AttentionTrace>>,
}

impl ForecastBundle {
    pub fn from_rollout(tape: &Tape, node: usize, out: &RolloutOutput, layers: usize) -> Self {
        let dim = tape.value(out.forecast_log[0]).len();
        let grab = |v: Var| tape.value(v).data().to_vec();
        let forecast_log: Vec<Vec<f64>> = out.forecast_log.iter().map(|&v| grab(v)).collect();
        let forecast_raw = forecast_log
            .iter()
            .map(|row| row.iter().map(|&v| from_log(v)).collect())
            .collect();
        let per_layer_log = (0..layers)
            .map(|l| {
                out.per_layer
                    .iter()
                    .map(|step| step.get(l).map_or(vec![0.0; dim], |&v| grab(v)))
                    .collect()
            })
            .collect();
        ForecastBundle {
            node,
            forecast_log,
            recurrent_log: out.recurrent_log.iter().map(|&v| grab(v)).collect(),
            network_log: out
                .network_log
                .iter()
                .map(|v| v.map_or(vec![0.0; dim], grab))
                .collect(),
            per_layer_log,
            forecast_raw,
            traces: out.traces.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::recurrent::tests::{tiny_config, zero_all};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(9)
    }

    fn random_params(hidden: usize, layers: usize, hops: usize) -> RadflowParams {
        let mut cfg = tiny_config(hidden, layers);
        cfg.hops = hops;
        RadflowParams::init(&cfg, &mut rng())
    }

    fn ego_sample(steps: usize) -> SampleInput {
        SampleInput {
            node: 0,
            ego_inputs: (0..steps).map(|t| vec![to_log(t as f64 + 1.0)]).collect(),
            neighbors: Vec::new(),
        }
    }

    fn neighbor(id: usize, steps: usize, present: Vec<bool>) -> NeighborSeries {
        NeighborSeries {
            id,
            inputs: (0..steps)
                .map(|t| vec![to_log(0.5 * t as f64 + id as f64)])
                .collect(),
            present,
            hop2: Vec::new(),
        }
    }

    #[test]
    fn log_transforms_invert() {
        for v in [0.0, 0.5, 3.0, 1e6] {
            assert!((from_log(to_log(v)) - v).abs() / v.max(1.0) < 1e-12);
        }
        assert_eq!(to_log(-2.0), 0.0);
        assert_eq!(from_log(-1.0), 0.0);
    }

    #[test]
    fn zero_params_give_zero_forecasts() {
        let mut params = random_params(3, 2, 1);
        zero_all(&mut params);
        let mut sample = ego_sample(5);
        sample.neighbors = vec![neighbor(1, 5, vec![true, true])];
        let mut tape = Tape::new();
        let out = run_sample(
            &mut tape,
            &params,
            &sample,
            RolloutOptions::eval(Feedback::Own),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(out.forecast_log.len(), 2);
        for &v in &out.forecast_log {
            assert_eq!(tape.value(v).data(), &[0.0]);
        }
    }

    #[test]
    fn single_step_horizon_consumes_exactly_backcast() {
        let mut cfg = tiny_config(3, 1);
        cfg.horizon = 1;
        cfg.hops = 0;
        let params = RadflowParams::init(&cfg, &mut rng());
        let sample = ego_sample(3);
        let mut tape = Tape::new();
        let out = run_sample(
            &mut tape,
            &params,
            &sample,
            RolloutOptions::eval(Feedback::Own),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(out.forecast_log.len(), 1);
        assert!(out.network_log[0].is_none());
    }

    #[test]
    fn hops_zero_ignores_neighbors_bitwise() {
        let params = random_params(4, 2, 0);
        let base = ego_sample(5);
        let mut with_neighbors = base.clone();
        with_neighbors.neighbors = vec![neighbor(1, 5, vec![true, true])];

        let runs: Vec<Vec<Vec<f64>>> = [&base, &with_neighbors]
            .iter()
            .map(|s| {
                let mut tape = Tape::new();
                let out = run_sample(
                    &mut tape,
                    &params,
                    s,
                    RolloutOptions::eval(Feedback::Own),
                    &mut rng(),
                )
                .unwrap();
                assert!(out.network_log.iter().all(|v| v.is_none()));
                out.forecast_log
                    .iter()
                    .map(|&v| tape.value(v).data().to_vec())
                    .collect()
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
    }

    #[test]
    fn teacher_forecasts_are_causal() {
        let params = random_params(4, 2, 0);
        let sample = ego_sample(4); // backcast 3, horizon 2 -> consumes 4 steps
        let mut perturbed = sample.clone();
        // The last consumed input feeds only the final forecast.
        perturbed.ego_inputs[3] = vec![to_log(99.0)];

        let values = |s: &SampleInput| {
            let mut tape = Tape::new();
            let out = run_sample(
                &mut tape,
                &params,
                s,
                RolloutOptions::eval(Feedback::Teacher),
                &mut rng(),
            )
            .unwrap();
            out.forecast_log
                .iter()
                .map(|&v| tape.value(v).data().to_vec())
                .collect::<Vec<_>>()
        };
        let a = values(&sample);
        let b = values(&perturbed);
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
    }

    #[test]
    fn own_and_teacher_agree_on_first_forecast() {
        let params = random_params(4, 2, 0);
        let sample = ego_sample(4);
        let first = |feedback: Feedback| {
            let mut tape = Tape::new();
            let out = run_sample(
                &mut tape,
                &params,
                &sample,
                RolloutOptions::eval(feedback),
                &mut rng(),
            )
            .unwrap();
            tape.value(out.forecast_log[0]).data().to_vec()
        };
        assert_eq!(first(Feedback::Own), first(Feedback::Teacher));
    }

    #[test]
    fn neighbor_presence_gates_aggregation_per_step() {
        let params = random_params(4, 1, 1);
        let mut sample = ego_sample(5);
        sample.neighbors = vec![neighbor(1, 5, vec![true, false])];
        let mut tape = Tape::new();
        let out = run_sample(
            &mut tape,
            &params,
            &sample,
            RolloutOptions::eval(Feedback::Own),
            &mut rng(),
        )
        .unwrap();
        assert!(out.network_log[0].is_some());
        assert!(out.network_log[1].is_none());
        assert!(out.traces[0].is_some());
        assert!(out.traces[1].is_none());
    }

    #[test]
    fn rollout_is_deterministic() {
        let params = random_params(4, 2, 1);
        let mut sample = ego_sample(5);
        sample.neighbors = vec![neighbor(1, 5, vec![true, true]), neighbor(2, 5, vec![false, true])];
        let run = || {
            let mut tape = Tape::new();
            let out = run_sample(
                &mut tape,
                &params,
                &sample,
                RolloutOptions::eval(Feedback::Own),
                &mut rng(),
            )
            .unwrap();
            ForecastBundle::from_rollout(&tape, 0, &out, params.config.layers)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.forecast_log, b.forecast_log);
        assert_eq!(a.network_log, b.network_log);
        assert_eq!(a.per_layer_log, b.per_layer_log);
    }

    #[test]
    fn bundle_terms_reconstruct_forecast() {
        let params = random_params(4, 3, 1);
        let mut sample = ego_sample(5);
        sample.neighbors = vec![neighbor(1, 5, vec![true, true])];
        let mut tape = Tape::new();
        let out = run_sample(
            &mut tape,
            &params,
            &sample,
            RolloutOptions::eval(Feedback::Own),
            &mut rng(),
        )
        .unwrap();
        let bundle = ForecastBundle::from_rollout(&tape, 0, &out, params.config.layers);
        for f in 0..2 {
            // recurrent + network reproduces the final forecast
            let sum = bundle.recurrent_log[f][0] + bundle.network_log[f][0];
            assert!((sum - bundle.forecast_log[f][0]).abs() < 1e-12);
            // per-layer contributions sum to the recurrent term
            let layer_sum: f64 = bundle.per_layer_log.iter().map(|l| l[f][0]).sum();
            assert!((layer_sum - bundle.recurrent_log[f][0]).abs() < 1e-9);
            assert!((from_log(bundle.forecast_log[f][0]) - bundle.forecast_raw[f][0]).abs() < 1e-12);
        }
    }

    #[test]
    fn short_series_is_rejected() {
        let params = random_params(3, 1, 0);
        let sample = ego_sample(2);
        let mut tape = Tape::new();
        let err = run_sample(
            &mut tape,
            &params,
            &sample,
            RolloutOptions::eval(Feedback::Own),
            &mut rng(),
        );
        assert!(matches!(err, Err(crate::error::RadflowError::Data(_))));
    }

    #[test]
    fn two_hop_star_runs_and_differs_from_one_hop() {
        let mut cfg = tiny_config(4, 1);
        cfg.hops = 2;
        let params = RadflowParams::init(&cfg, &mut rng());
        let mut inner = neighbor(2, 5, vec![true, true]);
        inner.id = 2;
        let mut mid = neighbor(1, 5, vec![true, true]);
        mid.hop2 = vec![inner];
        let mut sample = ego_sample(5);
        sample.neighbors = vec![mid];

        let forecast = |p: &RadflowParams, s: &SampleInput| {
            let mut tape = Tape::new();
            let out = run_sample(
                &mut tape,
                p,
                s,
                RolloutOptions::eval(Feedback::Own),
                &mut rng(),
            )
            .unwrap();
            tape.value(out.forecast_log[0]).data().to_vec()
        };
        let two_hop = forecast(&params, &sample);

        let mut flat = sample.clone();
        flat.neighbors[0].hop2.clear();
        let mut one_hop_params = params.clone();
        one_hop_params.config.hops = 1;
        let one_hop = forecast(&one_hop_params, &flat);
        assert_ne!(two_hop, one_hop);
    }
}
