use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::GateConfig;
use crate::numkern::Activation;

/// Architecture of the decoder-only transformer and its gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_theta: f64,
    pub activation: Activation,
    pub gate: GateConfig,
    /// Multiply logits by `1/sqrt(d_head)`.
    pub use_scale: bool,
    pub norm_eps: f64,
    /// Tile edge for the attention kernels used by full-sequence forwards.
    pub attn_tile: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 8,
            n_kv_heads: 4,
            d_model: 128,
            d_head: 16,
            d_ff: 512,
            vocab_size: 512,
            max_seq: 1024,
            rope_theta: 10_000.0,
            activation: Activation::Silu,
            gate: GateConfig::default(),
            use_scale: true,
            norm_eps: 1e-6,
            attn_tile: 64,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("attn_tile", self.attn_tile),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_heads × d_head ({} × {})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config(format!("d_head ({}) must be even for rotary embeddings", self.d_head)));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    pub fn scale(&self) -> f64 {
        if self.use_scale {
            1.0 / (self.d_head as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}
