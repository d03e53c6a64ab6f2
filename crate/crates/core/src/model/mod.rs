//! A minimal pre-norm decoder-only transformer:
//! RMSNorm → causal multi-head attention with RoPE → residual add →
//! RMSNorm → SiLU-gated MLP → residual add. No biases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

mod engine;
pub mod rope;
mod snkm;

pub use engine::{
    forward_with_capture, mlp_forward, mlp_probe, run_forward, silu, Intervention, LayerActivations,
    MlpIntermediates, Site,
};
pub use rope::rope_apply;
pub use snkm::{read_model, validate_model, write_model, SNKM_MAGIC};

/// Hyperparameters and vocabulary of a [`ToyModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_inner: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub rmsnorm_eps: f64,
    /// Display string per token id.
    pub vocab: Vec<String>,
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        let c = self;
        if c.num_layers == 0 || c.hidden_size == 0 || c.num_heads == 0 || c.mlp_inner == 0 || c.vocab_size == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if c.hidden_size != c.num_heads * c.head_dim {
            return Err(Error::Config(format!(
                "hidden_size {} != num_heads {} * head_dim {}",
                c.hidden_size, c.num_heads, c.head_dim
            )));
        }
        if c.head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim {} must be even for RoPE", c.head_dim)));
        }
        if c.vocab.len() != c.vocab_size {
            return Err(Error::Config(format!(
                "{} vocabulary strings for vocab_size {}",
                c.vocab.len(),
                c.vocab_size
            )));
        }
        if !(c.rope_base > 0.0 && c.rope_base.is_finite()) {
            return Err(Error::Config(format!("rope_base {} must be positive", c.rope_base)));
        }
        if !(c.rmsnorm_eps >= 0.0 && c.rmsnorm_eps.is_finite()) {
            return Err(Error::Config(format!("rmsnorm_eps {} must be non-negative", c.rmsnorm_eps)));
        }
        Ok(())
    }
}

/// Weights of one decoder layer. Projections map `input ↦ W · input`, so a
/// matrix has shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_norm: Vec<f64>,
    pub mlp_norm: Vec<f64>,
}

impl LayerWeights {
    pub fn zeros(h: usize, m: usize) -> Self {
        Self {
            w_q: Matrix::zeros(h, h),
            w_k: Matrix::zeros(h, h),
            w_v: Matrix::zeros(h, h),
            w_o: Matrix::zeros(h, h),
            w_gate: Matrix::zeros(m, h),
            w_up: Matrix::zeros(m, h),
            w_down: Matrix::zeros(h, m),
            attn_norm: vec![1.0; h],
            mlp_norm: vec![1.0; h],
        }
    }

    /// Named matrices in container order.
    pub(crate) fn matrices(&self) -> [(&'static str, &Matrix); 7] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelSpec {
    pub config: ModelConfig,
    /// `vocab_size × hidden_size`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
}

impl ToyModelSpec {
    /// A model with all projection weights zero and unit norm scales.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.check()?;
        let (h, m) = (config.hidden_size, config.mlp_inner);
        Ok(Self {
            embedding: Matrix::zeros(config.vocab_size, h),
            layers: (0..config.num_layers).map(|_| LayerWeights::zeros(h, m)).collect(),
            config,
        })
    }

    pub fn check(&self) -> Result<()> {
        let c = &self.config;
        c.check()?;
        let (h, m) = (c.hidden_size, c.mlp_inner);
        let shape = |name: &str, mat: &Matrix, r: usize, cols: usize| -> Result<()> {
            if mat.rows() != r || mat.cols() != cols {
                return Err(Error::Config(format!(
                    "{name} is {}x{}, expected {r}x{cols}",
                    mat.rows(),
                    mat.cols()
                )));
            }
            if !mat.is_finite() {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        shape("embedding", &self.embedding, c.vocab_size, h)?;
        if self.layers.len() != c.num_layers {
            return Err(Error::Config(format!(
                "{} layers for num_layers {}",
                self.layers.len(),
                c.num_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, mat) in l.matrices() {
                let (r, cols) = match name {
                    "w_gate" | "w_up" => (m, h),
                    "w_down" => (h, m),
                    _ => (h, h),
                };
                shape(&format!("layer {i} {name}"), mat, r, cols)?;
            }
            for (name, v) in [("attn_norm", &l.attn_norm), ("mlp_norm", &l.mlp_norm)] {
                if v.len() != h || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Config(format!(
                        "layer {i} {name} must be {h} finite values"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn token_strings(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.config.vocab.get(id).cloned().ok_or_else(|| {
                    Error::Index(format!("token id {id} outside vocabulary of {}", self.config.vocab_size))
                })
            })
            .collect()
    }
}
