//! Synthetic networked panels: seasonal + trend + noise base series per
//! node, a single diffusion pass that mixes in-neighbor base values with
//! strength gamma, and churned edge presence intervals.

use crate::data::graph::{DynamicGraph, EdgeInterval};
use crate::data::panel::SeriesPanel;
use crate::error::{RadflowError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub nodes: usize,
    pub steps: usize,
    /// Seasonality period in steps.
    pub period: usize,
    pub base_level: f64,
    pub amplitude: f64,
    /// Per-node trend slope drawn uniformly from this range.
    pub slope_min: f64,
    pub slope_max: f64,
    pub noise_sigma: f64,
    /// Cross-node influence strength, in [0, 1).
    pub gamma: f64,
    /// Probability an ordered node pair has an active edge.
    pub edge_density: f64,
    /// Per-step probability that an edge's presence is redrawn; 0 gives a
    /// static graph, 1 gives length-one intervals.
    pub churn: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 50,
            steps: 200,
            period: 7,
            base_level: 10.0,
            amplitude: 3.0,
            slope_min: -0.01,
            slope_max: 0.02,
            noise_sigma: 0.5,
            gamma: 0.0,
            edge_density: 0.05,
            churn: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RadflowError::InvalidConfig(msg));
        if self.nodes == 0 || self.steps == 0 {
            return bad("nodes and steps must be positive".into());
        }
        if self.period < 1 {
            return bad("period must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.edge_density) || !(0.0..=1.0).contains(&self.churn) {
            return bad("edge_density and churn must lie in [0, 1]".into());
        }
        if self.slope_min > self.slope_max {
            return bad("slope_min exceeds slope_max".into());
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }
}

pub struct SynthData {
    pub panel: SeriesPanel,
    pub graph: DynamicGraph,
    /// N x N row-major ground truth: entry [src * N + dst] is gamma times
    /// the fraction of steps the edge src -> dst is active.
    pub influence: Vec<f64>,
}

/// Generates the panel, graph and influence matrix. The random stream does
/// not depend on gamma, so runs that differ only in gamma share the same
/// base series and edges.
pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let (n, t) = (config.nodes, config.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| RadflowError::InvalidConfig(e.to_string()))?;

    // Base series: level + seasonality + trend + noise, floored at zero.
    let mut base = vec![0.0f64; n * t];
    for j in 0..n {
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let slope = rng.gen_range(config.slope_min..=config.slope_max);
        for s in 0..t {
            let seasonal = config.amplitude
                * (std::f64::consts::TAU * s as f64 / config.period as f64 + phase).sin();
            let eps = if config.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            base[j * t + s] = (config.base_level + seasonal + slope * s as f64 + eps).max(0.0);
        }
    }

    // Edge presence: a walk per ordered pair. Redraw points close the open
    // interval even when presence continues, so churn 1 yields length-one
    // intervals and churn 0 a static graph.
    let mut edges = Vec::new();
    for src in 0..n {
        for dst in 0..n {
            if src == dst {
                continue;
            }
            let mut present = rng.gen::<f64>() < config.edge_density;
            let mut open: Option<usize> = if present { Some(0) } else { None };
            for s in 1..t {
                if rng.gen::<f64>() < config.churn {
                    if let Some(start) = open.take() {
                        edges.push(EdgeInterval {
                            src,
                            dst,
                            start,
                            end: s,
                        });
                    }
                    present = rng.gen::<f64>() < config.edge_density;
                    if present {
                        open = Some(s);
                    }
                }
            }
            if let Some(start) = open {
                edges.push(EdgeInterval {
                    src,
                    dst,
                    start,
                    end: t,
                });
            }
        }
    }
    let graph = DynamicGraph::new(n, t, &edges)?;

    let mut influence = vec![0.0f64; n * n];
    for e in graph.edges() {
        influence[e.src * n + e.dst] += config.gamma * (e.end - e.start) as f64 / t as f64;
    }

    // One diffusion pass over base values; no feedback, so the ground truth
    // stays closed-form.
    let mut panel = SeriesPanel::new(n, t, 1);
    for j in 0..n {
        for s in 0..t {
            let mut v = base[j * t + s];
            if config.gamma > 0.0 {
                let inn = graph.neighbors_at(j, s);
                if !inn.is_empty() {
                    let mean: f64 =
                        inn.iter().map(|&i| base[i * t + s]).sum::<f64>() / inn.len() as f64;
                    v += config.gamma * mean;
                }
            }
            panel.set_value(j, s, 0, v);
        }
    }

    Ok(SynthData {
        panel,
        graph,
        influence,
    })
}
