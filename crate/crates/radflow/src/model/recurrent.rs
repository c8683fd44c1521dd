//! The L-block recurrent component: input projection, per-block LSTM cell
//! plus three feedforward heads, residual telescoping and forecast summation.

use crate::error::Result;
use crate::model::config::{EmbeddingSource, ModelConfig};
use crate::model::params::{BlockParams, FeedForwardParams, RadflowParams};
use crate::tape::{Tape, Var};
use rand::Rng;

/// Hidden and cell state of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockState {
    pub h: Var,
    pub c: Var,
}

/// Per-block states for a full stack, initialized to zero vectors.
#[derive(Debug, Clone)]
pub struct StackState {
    pub blocks: Vec<BlockState>,
}

impl StackState {
    pub fn zeros(tape: &mut Tape, config: &ModelConfig) -> Self {
        let blocks = (0..config.layers)
            .map(|_| BlockState {
                h: tape.zeros(config.hidden),
                c: tape.zeros(config.hidden),
            })
            .collect();
        StackState { blocks }
    }
}

/// Everything one stack step produces.
pub struct StepOutput {
    /// Sum of the per-block forecast vectors (the recurrent forecast input).
    pub forecast_sum: Var,
    /// Per-block forecast vectors, retained for layered decomposition.
    pub per_layer_forecast: Vec<Var>,
    /// Node embedding for this step, per the configured embedding source.
    pub embed: Var,
    /// Residual after the last block, z^{L+1}.
    pub residual: Var,
    /// Sum over blocks of the backcast vectors (telescoping check).
    pub backcast_sum: Var,
}

fn feed_forward(tape: &mut Tape, params: &RadflowParams, ff: &FeedForwardParams, x: Var) -> Result<Var> {
    let w1 = tape.param(&params.store, ff.w1);
    let w2 = tape.param(&params.store, ff.w2);
    let hidden = tape.linear(w1, x, None)?;
    let act = tape.gelu(hidden);
    tape.linear(w2, act, None)
}

/// One LSTM-plus-heads block step. The cell consumes (z, h, c); its hidden
/// output feeds the backcast, forecast and embedding heads.
pub fn block_step<R: Rng>(
    tape: &mut Tape,
    params: &RadflowParams,
    block: &BlockParams,
    z: Var,
    state: BlockState,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Var, Var, Var, BlockState)> {
    let h = params.config.hidden;
    let wz = tape.param(&params.store, block.lstm.w_input);
    let wh = tape.param(&params.store, block.lstm.w_hidden);
    let b = tape.param(&params.store, block.lstm.bias);

    let gz = tape.linear(wz, z, Some(b))?;
    let gh = tape.linear(wh, state.h, None)?;
    let gates = tape.add(gz, gh)?;
    let i_gate = tape.narrow(gates, 0, h)?;
    let f_gate = tape.narrow(gates, h, h)?;
    let g_gate = tape.narrow(gates, 2 * h, h)?;
    let o_gate = tape.narrow(gates, 3 * h, h)?;
    let i = tape.sigmoid(i_gate);
    let f = tape.sigmoid(f_gate);
    let g = tape.tanh(g_gate);
    let o = tape.sigmoid(o_gate);

    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let c_tanh = tape.tanh(c_new);
    let h_new = tape.mul(o, c_tanh)?;

    // Dropout sits on the head inputs only, so the recurrent state itself
    // stays deterministic across steps.
    let head_in = tape.dropout(h_new, dropout, train, rng)?;
    let p = feed_forward(tape, params, &block.head_backcast, head_in)?;
    let q = feed_forward(tape, params, &block.head_forecast, head_in)?;
    let u = feed_forward(tape, params, &block.head_embed, head_in)?;

    Ok((p, q, u, BlockState { h: h_new, c: c_new }))
}

/// Runs all blocks in order with residual subtraction, producing the
/// forecast sum, the node embedding and the per-layer forecast list.
pub fn stack_step<R: Rng>(
    tape: &mut Tape,
    params: &RadflowParams,
    z1: Var,
    state: &mut StackState,
    train: bool,
    rng: &mut R,
) -> Result<StepOutput> {
    let cfg = &params.config;
    let mut z = z1;
    let mut per_layer_forecast = Vec::with_capacity(cfg.layers);
    let mut h_sum: Option<Var> = None;
    let mut p_sum: Option<Var> = None;
    let mut q_sum: Option<Var> = None;
    let mut u_sum: Option<Var> = None;
    let add_into = |tape: &mut Tape, acc: &mut Option<Var>, v: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };

    for (l, block) in params.blocks.iter().enumerate() {
        let (p, q, u, new_state) =
            block_step(tape, params, block, z, state.blocks[l], cfg.dropout, train, rng)?;
        per_layer_forecast.push(q);
        add_into(tape, &mut h_sum, new_state.h)?;
        add_into(tape, &mut p_sum, p)?;
        add_into(tape, &mut q_sum, q)?;
        add_into(tape, &mut u_sum, u)?;
        state.blocks[l] = new_state;
        z = tape.sub(z, p)?;
    }

    let embed = match cfg.embedding_source {
        EmbeddingSource::U => u_sum.unwrap(),
        EmbeddingSource::H => h_sum.unwrap(),
        EmbeddingSource::P => p_sum.unwrap(),
        EmbeddingSource::Q => q_sum.unwrap(),
        EmbeddingSource::HP => tape.concat(&[h_sum.unwrap(), p_sum.unwrap()]),
        EmbeddingSource::HPQ => {
            tape.concat(&[h_sum.unwrap(), p_sum.unwrap(), q_sum.unwrap()])
        }
    };

    Ok(StepOutput {
        forecast_sum: q_sum.unwrap(),
        per_layer_forecast,
        embed,
        residual: z,
        backcast_sum: p_sum.unwrap(),
    })
}

/// z¹ = W_D · obs, the projection of a (log-transformed) observation into
/// the hidden space.
pub fn project_input(tape: &mut Tape, params: &RadflowParams, obs: Var) -> Result<Var> {
    let w = tape.param(&params.store, params.w_input);
    tape.linear(w, obs, None)
}

/// v̂^R = W^R · q̂^R, the recurrent forecast in log space.
pub fn recurrent_forecast(tape: &mut Tape, params: &RadflowParams, forecast_sum: Var) -> Result<Var> {
    let w = tape.param(&params.store, params.w_output);
    tape.linear(w, forecast_sum, None)
}
