//! Assembles rollout inputs from the panel and graph: ego windows plus
//! neighbor series chosen by importance-weighted sampling (training) or by
//! top presence count (evaluation).

use crate::data::graph::{
    sample_train_neighbors, top_neighbors_eval, window_candidates, DynamicGraph,
};
use crate::data::panel::FilledPanel;
use crate::error::{RadflowError, Result};
use crate::model::config::ModelConfig;
use crate::model::runner::{NeighborSeries, SampleInput};
use rand::Rng;

/// Neighbors actually sampled for training rollouts.
pub const TRAIN_NEIGHBORS: usize = 4;

fn check_window(
    panel: &FilledPanel,
    config: &ModelConfig,
    offset: usize,
) -> Result<(usize, usize)> {
    let (b, f) = (config.backcast, config.horizon);
    if offset + b + f > panel.n_steps() {
        return Err(RadflowError::Data(format!(
            "window [{offset}, {}) exceeds the {}-step panel",
            offset + b + f,
            panel.n_steps()
        )));
    }
    if panel.dim() != config.dim {
        return Err(RadflowError::Data(format!(
            "panel dim {} against model dim {}",
            panel.dim(),
            config.dim
        )));
    }
    Ok((b, f))
}

fn series_for(
    panel: &FilledPanel,
    graph: &DynamicGraph,
    ego: usize,
    neighbor: usize,
    offset: usize,
    b: usize,
    f: usize,
    hop2: Vec<NeighborSeries>,
) -> NeighborSeries {
    let present = (0..f)
        .map(|s| {
            graph
                .neighbors_at(ego, offset + b + s)
                .binary_search(&neighbor)
                .is_ok()
        })
        .collect();
    NeighborSeries {
        id: neighbor,
        inputs: panel.log_window(neighbor, offset, offset + b + f),
        present,
        hop2,
    }
}

/// Evaluation sample: top neighbors by presence count over the sample
/// window (sixteen at one hop, eight per node at two hops). Candidates are
/// drawn from the full window so edges that first appear during the horizon
/// still enter the per-step presence gating.
pub fn assemble_eval(
    config: &ModelConfig,
    panel: &FilledPanel,
    graph: &DynamicGraph,
    ego: usize,
    offset: usize,
) -> Result<SampleInput> {
    let (b, f) = check_window(panel, config, offset)?;
    let mut neighbors = Vec::new();
    if config.hops > 0 {
        let candidates = window_candidates(graph, panel, ego, offset, offset + b + f);
        for nb in top_neighbors_eval(&candidates, config.hops) {
            let hop2 = if config.hops == 2 {
                let inner = window_candidates(graph, panel, nb, offset, offset + b + f);
                top_neighbors_eval(&inner, config.hops)
                    .into_iter()
                    .map(|n2| series_for(panel, graph, nb, n2, offset, b, f, Vec::new()))
                    .collect()
            } else {
                Vec::new()
            };
            neighbors.push(series_for(panel, graph, ego, nb, offset, b, f, hop2));
        }
    }
    Ok(SampleInput {
        node: ego,
        ego_inputs: panel.log_window(ego, offset, offset + b + f),
        neighbors,
    })
}

/// Training sample: importance-weighted sampling without replacement of k
/// neighbors per hop.
pub fn assemble_train<R: Rng>(
    config: &ModelConfig,
    panel: &FilledPanel,
    graph: &DynamicGraph,
    ego: usize,
    offset: usize,
    k: usize,
    rng: &mut R,
) -> Result<SampleInput> {
    let (b, f) = check_window(panel, config, offset)?;
    let mut neighbors = Vec::new();
    if config.hops > 0 {
        let candidates = window_candidates(graph, panel, ego, offset, offset + b + f);
        for nb in sample_train_neighbors(&candidates, k, rng) {
            let hop2 = if config.hops == 2 {
                let inner = window_candidates(graph, panel, nb, offset, offset + b + f);
                sample_train_neighbors(&inner, k, rng)
                    .into_iter()
                    .map(|n2| series_for(panel, graph, nb, n2, offset, b, f, Vec::new()))
                    .collect()
            } else {
                Vec::new()
            };
            neighbors.push(series_for(panel, graph, ego, nb, offset, b, f, hop2));
        }
    }
    Ok(SampleInput {
        node: ego,
        ego_inputs: panel.log_window(ego, offset, offset + b + f),
        neighbors,
    })
}
