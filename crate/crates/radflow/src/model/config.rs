use crate::error::{RadflowError, Result};
use serde::{Deserialize, Serialize};

/// Which neighbor aggregation the network component uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Multi-head dot-product attention with a learnable null slot.
    Attention,
    /// Arithmetic average of raw neighbor embeddings, projected combination.
    GraphSage,
    /// Arithmetic average with direct (unprojected) ego addition.
    MeanPool,
}

/// Which per-block vectors form the node embedding fed to aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    U,
    H,
    P,
    Q,
    #[serde(rename = "h+p")]
    HP,
    #[serde(rename = "h+p+q")]
    HPQ,
}

impl EmbeddingSource {
    /// Embedding width as a multiple of the hidden size.
    pub fn width_factor(self) -> usize {
        match self {
            EmbeddingSource::U
            | EmbeddingSource::H
            | EmbeddingSource::P
            | EmbeddingSource::Q => 1,
            EmbeddingSource::HP => 2,
            EmbeddingSource::HPQ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Backcast length in steps.
    pub backcast: usize,
    /// Forecast horizon in steps.
    pub horizon: usize,
    /// Series dimension D.
    pub dim: usize,
    /// Hidden size H.
    pub hidden: usize,
    /// Block count L.
    pub layers: usize,
    pub dropout: f64,
    /// Attention head count; must divide the hidden size.
    pub heads: usize,
    /// 0 disables the network component entirely.
    pub hops: usize,
    pub variant: Variant,
    pub embedding_source: EmbeddingSource,
    /// When false, the ego embedding is added to the aggregate directly
    /// instead of through the combination projections.
    pub final_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backcast: 112,
            horizon: 28,
            dim: 1,
            hidden: 128,
            layers: 8,
            dropout: 0.1,
            heads: 4,
            hops: 1,
            variant: Variant::Attention,
            embedding_source: EmbeddingSource::U,
            final_projection: true,
        }
    }
}

impl ModelConfig {
    /// Width of the node embedding consumed by aggregation.
    pub fn embed_dim(&self) -> usize {
        self.hidden * self.embedding_source.width_factor()
    }

    /// Width of the combined vector that feeds the network output projection.
    pub fn combined_dim(&self) -> usize {
        if self.final_projection {
            self.hidden
        } else {
            self.embed_dim()
        }
    }

    /// Width of the aggregated neighbor vector.
    pub fn aggregate_dim(&self) -> usize {
        match self.variant {
            Variant::Attention => self.hidden,
            Variant::GraphSage | Variant::MeanPool => self.embed_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(RadflowError::InvalidConfig(m));
        if self.backcast == 0 || self.horizon == 0 || self.layers == 0 {
            return err("backcast, horizon and layers must all be >= 1".into());
        }
        if self.hidden == 0 || self.dim == 0 {
            return err("hidden and dim must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.hops > 2 {
            return err(format!("hops must be 0, 1 or 2, got {}", self.hops));
        }
        if self.hops > 0 {
            if self.variant == Variant::Attention {
                if self.heads == 0 || self.hidden % self.heads != 0 {
                    return err(format!(
                        "hidden size {} not divisible by {} heads",
                        self.hidden, self.heads
                    ));
                }
            }
            if !self.final_projection && self.aggregate_dim() != self.embed_dim() {
                return err(
                    "direct ego addition needs matching embedding and aggregate widths".into(),
                );
            }
            if self.hops == 2 && self.combined_dim() != self.embed_dim() {
                return err(
                    "two-hop recursion needs the combined width to match the embedding width"
                        .into(),
                );
            }
        }
        Ok(())
    }
}

impl ModelConfig {
    /// MeanPooling per its definition: mean aggregation with direct addition.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        if variant == Variant::MeanPool {
            self.final_projection = false;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_published_hyperparameters() {
        let c = ModelConfig::default();
        assert_eq!(c.backcast, 112);
        assert_eq!(c.horizon, 28);
        assert_eq!(c.hidden, 128);
        assert_eq!(c.layers, 8);
        assert_eq!(c.heads, 4);
        assert!((c.dropout - 0.1).abs() < 1e-12);
        c.validate().unwrap();
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.hops = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.horizon = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn direct_addition_needs_matching_widths() {
        let mut c = ModelConfig::default().with_variant(Variant::MeanPool);
        c.embedding_source = EmbeddingSource::U;
        c.validate().unwrap();
        // A concatenated embedding is wider than the attention aggregate,
        // so the direct sum only validates when the widths agree.
        c.final_projection = false;
        c.variant = Variant::Attention;
        c.embedding_source = EmbeddingSource::HP;
        assert!(c.validate().is_err(), "attention aggregate is H wide");
    }

    #[test]
    fn two_hop_needs_combined_width_to_match() {
        let mut c = ModelConfig::default();
        c.hops = 2;
        c.validate().unwrap();
        c.embedding_source = EmbeddingSource::HP;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embedding_widths() {
        let mut c = ModelConfig::default();
        c.embedding_source = EmbeddingSource::HPQ;
        assert_eq!(c.embed_dim(), 3 * c.hidden);
        assert_eq!(c.aggregate_dim(), c.hidden);
        c.variant = Variant::GraphSage;
        assert_eq!(c.aggregate_dim(), 3 * c.hidden);
    }

    #[test]
    fn config_serde_round_trip_rejects_unknown_keys() {
        let c = ModelConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
        let with_extra = text.replace('}', ",\"bogus\":1}");
        assert!(serde_json::from_str::<ModelConfig>(&with_extra).is_err());
    }
}
