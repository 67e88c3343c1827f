use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Modality-A input width; 0 means the model has no A frontend.
    pub dim_a: usize,
    /// Modality-B input width; 0 means the model has no B frontend.
    pub dim_b: usize,
    pub frontend_dim: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub n_clusters: usize,
    pub decoder_layers: usize,
    /// Size of the transcript alphabet (frame-head classes).
    pub n_units: usize,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim_a: 16,
            dim_b: 24,
            frontend_dim: 32,
            embed_dim: 64,
            layers: 3,
            heads: 4,
            ffn_dim: 128,
            n_clusters: 40,
            decoder_layers: 1,
            n_units: 20,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim_a == 0 && self.dim_b == 0 {
            return bad("the model needs at least one frontend".into());
        }
        if self.frontend_dim == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return bad("widths must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.layers < 1 {
            return bad("at least one encoder layer is required".into());
        }
        if self.n_clusters < 2 {
            return bad(format!("n_clusters must be >= 2, got {}", self.n_clusters));
        }
        if self.n_units < 1 {
            return bad("n_units must be positive".into());
        }
        Ok(())
    }

    /// Transcript alphabet plus begin, end and padding tokens.
    pub fn vocab_size(&self) -> usize {
        self.n_units + 3
    }
}

/// Downstream task head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Per-frame unit classifier followed by run-length collapse.
    FrameTranscription,
    /// Autoregressive decoder over transcript tokens.
    #[serde(rename = "seq2seq")]
    Seq2Seq,
}
