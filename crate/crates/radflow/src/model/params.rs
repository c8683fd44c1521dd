use crate::model::config::{ModelConfig, Variant};
use crate::tape::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// LSTM cell weights in gate order (input, forget, cell, output), stacked
/// along the first axis.
#[derive(Debug, Clone)]
pub struct LstmParams {
    /// [4H, H] over the block input z.
    pub w_input: ParamId,
    /// [4H, H] over the previous hidden state.
    pub w_hidden: ParamId,
    /// [4H]
    pub bias: ParamId,
}

/// Two linear maps with a GELU between them; no biases.
#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub lstm: LstmParams,
    pub head_backcast: FeedForwardParams,
    pub head_forecast: FeedForwardParams,
    pub head_embed: FeedForwardParams,
}

#[derive(Debug, Clone)]
pub struct AggregationParams {
    /// [H, E] query projection (per-head slices of the output).
    pub w_query: Option<ParamId>,
    /// [H, E] key projection.
    pub w_key: Option<ParamId>,
    /// [H, E] value projection.
    pub w_value: Option<ParamId>,
    /// [H] per-head null keys, concatenated; enables zero attention.
    pub null_key: Option<ParamId>,
    /// [H] per-head null values, concatenated.
    pub null_value: Option<ParamId>,
    /// [H, E] ego combination map.
    pub w_ego: Option<ParamId>,
    /// [H, A] neighbor combination map.
    pub w_neighbor: Option<ParamId>,
    /// [D, C] output projection to the series dimension.
    pub w_out: ParamId,
}

/// All learnable weights of the model, backed by a flat [`ParamStore`].
#[derive(Debug, Clone)]
pub struct RadflowParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// [H, D] input projection.
    pub w_input: ParamId,
    pub blocks: Vec<BlockParams>,
    /// [D, H] recurrent output projection.
    pub w_output: ParamId,
    pub aggregation: Option<AggregationParams>,
}

impl RadflowParams {
    /// Fresh parameters: weights uniform in ±1/√H, biases zero.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let h = config.hidden;
        let d = config.dim;
        let bound = 1.0 / (h as f64).sqrt();
        let mut store = ParamStore::new();
        let mut weight = |store: &mut ParamStore, name: String, shape: Vec<usize>| {
            let t = Tensor::uniform(shape, bound, rng);
            store.add(name, t)
        };

        let w_input = weight(&mut store, "input.weight".into(), vec![h, d]);
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let lstm = LstmParams {
                w_input: weight(&mut store, format!("block{l}.lstm.w_input"), vec![4 * h, h]),
                w_hidden: weight(&mut store, format!("block{l}.lstm.w_hidden"), vec![4 * h, h]),
                bias: store.add(format!("block{l}.lstm.bias"), Tensor::zeros(vec![4 * h])),
            };
            let mut head = |store: &mut ParamStore, tag: &str| FeedForwardParams {
                w1: weight(store, format!("block{l}.{tag}.w1"), vec![h, h]),
                w2: weight(store, format!("block{l}.{tag}.w2"), vec![h, h]),
            };
            blocks.push(BlockParams {
                lstm,
                head_backcast: head(&mut store, "backcast"),
                head_forecast: head(&mut store, "forecast"),
                head_embed: head(&mut store, "embed"),
            });
        }
        let w_output = weight(&mut store, "output.weight".into(), vec![d, h]);

        let aggregation = (config.hops > 0).then(|| {
            let e = config.embed_dim();
            let a = config.aggregate_dim();
            let c = config.combined_dim();
            let attention = config.variant == Variant::Attention;
            AggregationParams {
                w_query: attention
                    .then(|| weight(&mut store, "agg.query".into(), vec![h, e])),
                w_key: attention.then(|| weight(&mut store, "agg.key".into(), vec![h, e])),
                w_value: attention.then(|| weight(&mut store, "agg.value".into(), vec![h, e])),
                null_key: attention
                    .then(|| weight(&mut store, "agg.null_key".into(), vec![h])),
                null_value: attention
                    .then(|| weight(&mut store, "agg.null_value".into(), vec![h])),
                w_ego: config
                    .final_projection
                    .then(|| weight(&mut store, "agg.ego".into(), vec![c, e])),
                w_neighbor: config
                    .final_projection
                    .then(|| weight(&mut store, "agg.neighbor".into(), vec![c, a])),
                w_out: weight(&mut store, "agg.out".into(), vec![d, c]),
            }
        });

        RadflowParams {
            config: config.clone(),
            store,
            w_input,
            blocks,
            w_output,
            aggregation,
        }
    }

    pub fn n_params(&self) -> usize {
        self.store.len()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.store.iter().map(|(_, _, t)| t.len()).sum()
    }
}
