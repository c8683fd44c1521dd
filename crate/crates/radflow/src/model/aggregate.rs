//! Neighbor aggregation producing the network term: multi-head dot-product
//! attention with a learnable null slot, plus the GraphSage and MeanPooling
//! variants and the ego combination.

use crate::error::{RadflowError, Result};
use crate::model::config::Variant;
use crate::model::params::RadflowParams;
use crate::tape::{Tape, Var};

/// Attention scores recorded for one aggregation call. The null slot is the
/// final entry of each per-head row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AttentionTrace {
    pub neighbor_ids: Vec<usize>,
    /// heads x (neighbors + null slot), each row on the simplex.
    pub per_head: Vec<Vec<f64>>,
    /// Head-averaged score per neighbor, null slot last.
    pub mean_scores: Vec<f64>,
}

impl AttentionTrace {
    /// Head-averaged score for one neighbor by position.
    pub fn neighbor_score(&self, idx: usize) -> f64 {
        self.mean_scores[idx]
    }

    pub fn null_score(&self) -> f64 {
        *self.mean_scores.last().expect("trace has a null slot")
    }
}

/// Multi-head dot-product attention over the neighbor embeddings, with the
/// null key/value slot inside the softmax so a node can attend to nothing.
/// The combined heads pass through a GELU. `include_null` exists so tests
/// can exercise the plain softmax; model code always enables it.
pub fn aggregate_attention(
    tape: &mut Tape,
    params: &RadflowParams,
    ego_embed: Var,
    neighbor_embeds: &[(usize, Var)],
    include_null: bool,
) -> Result<(Var, AttentionTrace)> {
    let cfg = &params.config;
    let agg = params
        .aggregation
        .as_ref()
        .ok_or_else(|| RadflowError::InvalidConfig("aggregation params missing".into()))?;
    let heads = cfg.heads;
    let head_dim = cfg.hidden / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    if !include_null && neighbor_embeds.is_empty() {
        return Err(RadflowError::InvalidConfig(
            "attention without the null slot needs at least one neighbor".into(),
        ));
    }

    let w_query = tape.param(&params.store, agg.w_query.expect("attention params"));
    let w_key = tape.param(&params.store, agg.w_key.expect("attention params"));
    let w_value = tape.param(&params.store, agg.w_value.expect("attention params"));
    let null_key = tape.param(&params.store, agg.null_key.expect("attention params"));
    let null_value = tape.param(&params.store, agg.null_value.expect("attention params"));

    let query = tape.linear(w_query, ego_embed, None)?;
    let keys: Vec<Var> = neighbor_embeds
        .iter()
        .map(|&(_, u)| tape.linear(w_key, u, None))
        .collect::<Result<_>>()?;
    let values: Vec<Var> = neighbor_embeds
        .iter()
        .map(|&(_, u)| tape.linear(w_value, u, None))
        .collect::<Result<_>>()?;

    let mut head_outputs = Vec::with_capacity(heads);
    let mut per_head_scores = Vec::with_capacity(heads);
    for head in 0..heads {
        let off = head * head_dim;
        let q_h = tape.narrow(query, off, head_dim)?;
        let mut logits = Vec::with_capacity(keys.len() + 1);
        for &k in &keys {
            let k_h = tape.narrow(k, off, head_dim)?;
            logits.push(tape.dot(q_h, k_h)?);
        }
        if include_null {
            let nk_h = tape.narrow(null_key, off, head_dim)?;
            logits.push(tape.dot(q_h, nk_h)?);
        }
        let raw = tape.concat(&logits);
        let scaled = tape.scale(raw, scale);
        let lambda = tape.softmax(scaled)?;
        per_head_scores.push(tape.value(lambda).data().to_vec());

        let mut acc: Option<Var> = None;
        for (i, &v) in values.iter().enumerate() {
            let v_h = tape.narrow(v, off, head_dim)?;
            let l_i = tape.narrow(lambda, i, 1)?;
            let term = tape.scale_by_scalar(v_h, l_i)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        if include_null {
            let nv_h = tape.narrow(null_value, off, head_dim)?;
            let l_null = tape.narrow(lambda, values.len(), 1)?;
            let term = tape.scale_by_scalar(nv_h, l_null)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        head_outputs.push(acc.expect("at least one softmax slot"));
    }

    let combined = tape.concat(&head_outputs);
    let activated = tape.gelu(combined);

    let slots = neighbor_embeds.len() + include_null as usize;
    let mean_scores = (0..slots)
        .map(|i| per_head_scores.iter().map(|row| row[i]).sum::<f64>() / heads as f64)
        .collect();
    let trace = AttentionTrace {
        neighbor_ids: neighbor_embeds.iter().map(|&(id, _)| id).collect(),
        per_head: per_head_scores,
        mean_scores,
    };
    Ok((activated, trace))
}

/// Plain arithmetic average of the raw neighbor embeddings; no value
/// projection and no GELU. An empty neighborhood yields the zero vector.
pub fn aggregate_mean(
    tape: &mut Tape,
    width: usize,
    neighbor_embeds: &[(usize, Var)],
) -> Result<Var> {
    if neighbor_embeds.is_empty() {
        return Ok(tape.zeros(width));
    }
    let mut acc = neighbor_embeds[0].1;
    for &(_, u) in &neighbor_embeds[1..] {
        acc = tape.add(acc, u)?;
    }
    Ok(tape.scale(acc, 1.0 / neighbor_embeds.len() as f64))
}

/// û = W^E u + W^N ũ, or the direct sum when the final projection is
/// disabled (the MeanPooling variant and its ablation).
pub fn combine_ego(
    tape: &mut Tape,
    params: &RadflowParams,
    ego_embed: Var,
    aggregated: Var,
) -> Result<Var> {
    let agg = params
        .aggregation
        .as_ref()
        .ok_or_else(|| RadflowError::InvalidConfig("aggregation params missing".into()))?;
    if params.config.final_projection {
        let w_ego = tape.param(&params.store, agg.w_ego.expect("projection params"));
        let w_neighbor = tape.param(&params.store, agg.w_neighbor.expect("projection params"));
        let e = tape.linear(w_ego, ego_embed, None)?;
        let n = tape.linear(w_neighbor, aggregated, None)?;
        tape.add(e, n)
    } else {
        tape.add(ego_embed, aggregated)
    }
}

/// v̂^A = W^A û, the network forecast contribution in log space.
pub fn network_forecast(tape: &mut Tape, params: &RadflowParams, combined: Var) -> Result<Var> {
    let agg = params
        .aggregation
        .as_ref()
        .ok_or_else(|| RadflowError::InvalidConfig("aggregation params missing".into()))?;
    let w = tape.param(&params.store, agg.w_out);
    tape.linear(w, combined, None)
}

/// One full aggregation for an ego step: variant dispatch, ego combination
/// and output projection. Returns the log-space network term and, for the
/// attention variant, the trace.
pub fn network_term(
    tape: &mut Tape,
    params: &RadflowParams,
    ego_embed: Var,
    neighbor_embeds: &[(usize, Var)],
) -> Result<(Var, Option<AttentionTrace>)> {
    let cfg = &params.config;
    let (aggregated, trace) = match cfg.variant {
        Variant::Attention => {
            let (a, t) = aggregate_attention(tape, params, ego_embed, neighbor_embeds, true)?;
            (a, Some(t))
        }
        Variant::GraphSage | Variant::MeanPool => (
            aggregate_mean(tape, cfg.aggregate_dim(), neighbor_embeds)?,
            None,
        ),
    };
    let combined = combine_ego(tape, params, ego_embed, aggregated)?;
    let out = network_forecast(tape, params, combined)?;
    Ok((out, trace))
}
