//! The batch training loop: uniform window sampling, neighbor sampling,
//! rollouts with own-feedback on the ego and teacher inputs on neighbors,
//! gradient clipping, the AdamW update and per-epoch validation.

use crate::assemble::{assemble_train, TRAIN_NEIGHBORS};
use crate::data::graph::DynamicGraph;
use crate::data::panel::FilledPanel;
use crate::error::{RadflowError, Result};
use crate::eval::evaluate::{evaluate, EvalOptions, Setting};
use crate::model::config::ModelConfig;
use crate::model::params::RadflowParams;
use crate::model::runner::{run_sample, RolloutOptions};
use crate::tape::{Gradients, Tape};
use crate::train::checkpoint;
use crate::train::loss::smape_loss;
use crate::train::optim::{AdamW, OptimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Training windows must fit inside [0, train_end).
    pub train_end: usize,
    /// Validation horizon is the F steps ending at valid_end.
    pub valid_end: usize,
    /// Neighbors sampled per hop for each training rollout.
    #[serde(default = "default_train_neighbors")]
    pub train_neighbors: usize,
}

fn default_train_neighbors() -> usize {
    TRAIN_NEIGHBORS
}

impl FitConfig {
    pub fn validate(&self, panel: &FilledPanel) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        let window = self.model.backcast + self.model.horizon;
        if self.train_end < window {
            return Err(RadflowError::Data(format!(
                "training range of {} steps is shorter than the {window}-step window",
                self.train_end
            )));
        }
        if self.valid_end < window || self.valid_end > panel.n_steps() {
            return Err(RadflowError::Data(format!(
                "validation end {} outside the {}-step panel",
                self.valid_end,
                panel.n_steps()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub valid_smape: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let tmp = path.with_extension("tmp");
        {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            for rec in &self.steps {
                serde_json::to_writer(&mut w, rec).map_err(|e| RadflowError::Data(e.to_string()))?;
                writeln!(w)?;
            }
            for rec in &self.epochs {
                serde_json::to_writer(&mut w, rec).map_err(|e| RadflowError::Data(e.to_string()))?;
                writeln!(w)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub struct FitResult {
    /// Parameters from the epoch with the best validation SMAPE.
    pub params: RadflowParams,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_valid_smape: f64,
}

fn validation_smape(
    params: &RadflowParams,
    panel: &FilledPanel,
    graph: &DynamicGraph,
    valid_end: usize,
) -> Result<f64> {
    let opts = EvalOptions {
        setting: Setting::Imputation,
        test_start: valid_end - params.config.horizon,
        nonzero_only: false,
    };
    let (report, _) = evaluate(params, panel, graph, &opts, None)?;
    Ok(report.smape)
}

/// Trains from fresh parameters. One optimizer step per batch; windows are
/// sampled uniformly over the training range, neighbors by importance
/// weight. Checkpoints per epoch under `out_dir` when given; the returned
/// parameters are the best-validation epoch's.
pub fn fit(
    panel: &FilledPanel,
    graph: &DynamicGraph,
    config: &FitConfig,
    out_dir: Option<&Path>,
) -> Result<FitResult> {
    config.validate(panel)?;
    let mcfg = &config.model;
    let ocfg = &config.optim;
    let mut rng = ChaCha8Rng::seed_from_u64(ocfg.seed);
    let mut params = RadflowParams::init(mcfg, &mut rng);
    let mut optim = AdamW::new(ocfg.clone(), &params.store);
    let mut log = TrainLog::default();

    let window = mcfg.backcast + mcfg.horizon;
    let max_offset = config.train_end - window;
    let n_nodes = panel.n_nodes();
    let total_steps = ocfg.total_steps();
    let started = Instant::now();

    let mut best: Option<(usize, f64, RadflowParams)> = None;
    let mut epoch = 0usize;

    for step in 0..total_steps {
        let mut tape = Tape::new();
        let mut batch_losses = Vec::with_capacity(ocfg.batch_size);
        for _ in 0..ocfg.batch_size {
            let node = rng.gen_range(0..n_nodes);
            let offset = rng.gen_range(0..=max_offset);
            let sample = assemble_train(
                mcfg,
                panel,
                graph,
                node,
                offset,
                config.train_neighbors,
                &mut rng,
            )?;
            let out = run_sample(&mut tape, &params, &sample, RolloutOptions::train(), &mut rng)?;
            let truth = panel.raw_window(node, offset + mcfg.backcast, offset + window);
            batch_losses.push(smape_loss(&mut tape, &out.forecast_log, &truth)?);
        }
        let stacked = tape.concat(&batch_losses);
        let loss = tape.mean(stacked);
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(RadflowError::Diverged {
                step,
                reason: format!("loss {loss_value}"),
            });
        }

        let node_grads = tape.backward(loss)?;
        let mut grads = Gradients::new(params.store.len());
        node_grads.accumulate_params(&tape, &mut grads);
        let grad_norm = grads.clip_global_norm(ocfg.clip_norm);
        let lr = ocfg.lr_at(step + 1);
        optim.step(&mut params.store, &grads, lr)?;

        log.steps.push(StepRecord {
            step,
            lr,
            loss: loss_value,
            grad_norm,
            wall_ms: started.elapsed().as_millis() as u64,
        });

        // Epoch boundaries start counting after the warmup.
        let done = step + 1;
        if done > ocfg.warmup_steps && (done - ocfg.warmup_steps) % ocfg.steps_per_epoch == 0 {
            let valid = validation_smape(&params, panel, graph, config.valid_end)?;
            log.epochs.push(EpochRecord {
                epoch,
                step,
                valid_smape: valid,
            });
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                checkpoint::save(&params, &dir.join(format!("epoch{epoch}.ckpt")))?;
            }
            if best.as_ref().map_or(true, |(_, b, _)| valid < *b) {
                best = Some((epoch, valid, params.clone()));
            }
            epoch += 1;
        }
    }

    let (best_epoch, best_valid_smape, best_params) = best.unwrap_or_else(|| {
        // No epoch boundary was crossed (warmup-only schedules); fall back
        // to the final parameters.
        (0, f64::NAN, params.clone())
    });
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&best_params, &dir.join("best.ckpt"))?;
    }
    Ok(FitResult {
        params: best_params,
        log,
        best_epoch,
        best_valid_smape,
    })
}
