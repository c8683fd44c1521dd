//! ARNet baseline: an order-7 autoregressive model per node plus learned
//! edge weights on a static graph, fit on the SMAPE objective. Evaluated in
//! the imputation setting only, since it reads neighbor values at the
//! predicted step.

use crate::data::graph::DynamicGraph;
use crate::data::panel::FilledPanel;
use crate::error::{RadflowError, Result};
use crate::tape::{Gradients, ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;
use crate::train::loss::SMAPE_DELTA;
use crate::train::optim::{AdamW, OptimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArnetConfig {
    pub lags: usize,
    /// An edge joins the static graph when active on at least this fraction
    /// of steps.
    pub static_fraction: f64,
    pub optim: OptimConfig,
}

impl Default for ArnetConfig {
    fn default() -> Self {
        ArnetConfig {
            lags: 7,
            static_fraction: 0.5,
            optim: OptimConfig::default(),
        }
    }
}

/// Per-node lag coefficients and per-edge weights over the collapsed
/// static graph.
pub struct Arnet {
    pub lags: usize,
    pub store: ParamStore,
    pub alpha: Vec<ParamId>,
    /// One weight vector per node, aligned with `neighbors`; `None` for
    /// nodes with no static in-edges.
    pub beta: Vec<Option<ParamId>>,
    pub neighbors: Vec<Vec<usize>>,
}

impl Arnet {
    /// Coefficients start at the lag average (alpha = 1/lags, beta = 0).
    pub fn init(n_nodes: usize, lags: usize, neighbors: Vec<Vec<usize>>) -> Self {
        let mut store = ParamStore::new();
        let alpha = (0..n_nodes)
            .map(|j| {
                store.add(
                    format!("node{j}.alpha"),
                    Tensor::new(vec![lags], vec![1.0 / lags as f64; lags]).unwrap(),
                )
            })
            .collect();
        let beta = neighbors
            .iter()
            .enumerate()
            .map(|(j, nbs)| {
                (!nbs.is_empty())
                    .then(|| store.add(format!("node{j}.beta"), Tensor::zeros(vec![nbs.len()])))
            })
            .collect();
        Arnet {
            lags,
            store,
            alpha,
            beta,
            neighbors,
        }
    }

    /// Static in-neighbors: edges active on at least `fraction` of steps.
    pub fn static_neighbors(graph: &DynamicGraph, fraction: f64) -> Vec<Vec<usize>> {
        let n = graph.n_nodes();
        (0..n)
            .map(|dst| {
                let mut nbs: Vec<usize> = (0..n)
                    .filter(|&src| {
                        src != dst && graph.presence_fraction(src, dst) >= fraction
                    })
                    .collect();
                nbs.sort_unstable();
                nbs
            })
            .collect()
    }

    /// One-step prediction on the tape; lags and neighbor values are true
    /// observations.
    fn predict_on_tape(
        &self,
        tape: &mut Tape,
        panel: &FilledPanel,
        node: usize,
        t: usize,
    ) -> Result<Var> {
        if t < self.lags {
            return Err(RadflowError::Data(format!(
                "step {t} has fewer than {} lags of history",
                self.lags
            )));
        }
        let alpha = tape.param(&self.store, self.alpha[node]);
        let mut acc: Option<Var> = None;
        let add = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| -> Result<()> {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, v)?,
                None => v,
            });
            Ok(())
        };
        for k in 1..=self.lags {
            let lag = tape.leaf_vec(panel.raw_at(node, t - k).to_vec());
            let a_k = tape.narrow(alpha, k - 1, 1)?;
            let term = tape.scale_by_scalar(lag, a_k)?;
            add(tape, &mut acc, term)?;
        }
        if let Some(beta_id) = self.beta[node] {
            let beta = tape.param(&self.store, beta_id);
            for (i, &nb) in self.neighbors[node].iter().enumerate() {
                let v = tape.leaf_vec(panel.raw_at(nb, t).to_vec());
                let b_i = tape.narrow(beta, i, 1)?;
                let term = tape.scale_by_scalar(v, b_i)?;
                add(tape, &mut acc, term)?;
            }
        }
        Ok(acc.expect("at least one lag term"))
    }

    /// Raw-scale prediction for one step (imputation mode).
    pub fn predict(&self, panel: &FilledPanel, node: usize, t: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.predict_on_tape(&mut tape, panel, node, t)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Per-step predictions over [test_start, test_start + horizon), each
    /// step conditioned on true history.
    pub fn predict_window(
        &self,
        panel: &FilledPanel,
        node: usize,
        test_start: usize,
        horizon: usize,
    ) -> Result<Vec<Vec<f64>>> {
        (0..horizon)
            .map(|f| self.predict(panel, node, test_start + f))
            .collect()
    }
}

/// Fits by AdamW on per-step raw-scale SMAPE over samples drawn uniformly
/// from [lags, train_end). Returns the model and the per-step loss curve.
pub fn arnet_fit(
    panel: &FilledPanel,
    graph: &DynamicGraph,
    config: &ArnetConfig,
    train_end: usize,
) -> Result<(Arnet, Vec<f64>)> {
    config.optim.validate()?;
    if config.lags == 0 || train_end <= config.lags || train_end > panel.n_steps() {
        return Err(RadflowError::Data(format!(
            "training range [{}, {train_end}) is empty",
            config.lags
        )));
    }
    let neighbors = Arnet::static_neighbors(graph, config.static_fraction);
    let mut model = Arnet::init(panel.n_nodes(), config.lags, neighbors);
    let mut optim = AdamW::new(config.optim.clone(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.optim.seed);
    let mut losses = Vec::new();

    for step in 0..config.optim.total_steps() {
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(config.optim.batch_size);
        for _ in 0..config.optim.batch_size {
            let node = rng.gen_range(0..panel.n_nodes());
            let t = rng.gen_range(config.lags..train_end);
            let pred = model.predict_on_tape(&mut tape, panel, node, t)?;
            let truth = tape.leaf_vec(panel.raw_at(node, t).to_vec());
            let diff = tape.sub(pred, truth)?;
            let abs_diff = tape.abs(diff);
            let num = tape.scale(abs_diff, 100.0);
            let abs_t = tape.abs(truth);
            let abs_p = tape.abs(pred);
            let mag = tape.add(abs_t, abs_p)?;
            let half = tape.scale(mag, 0.5);
            let den = tape.add_const(half, SMAPE_DELTA);
            terms.push(tape.div(num, den)?);
        }
        let all = tape.concat(&terms);
        let loss = tape.mean(all);
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(RadflowError::Diverged {
                step,
                reason: format!("loss {loss_value}"),
            });
        }
        let node_grads = tape.backward(loss)?;
        let mut grads = Gradients::new(model.store.len());
        node_grads.accumulate_params(&tape, &mut grads);
        grads.clip_global_norm(config.optim.clip_norm);
        let lr = config.optim.lr_at(step + 1);
        optim.step(&mut model.store, &grads, lr)?;
        losses.push(loss_value);
    }
    Ok((model, losses))
}
