//! Activation-trace data model and the `SNKT` container.
//!
//! `hidden` at layer `l` is the residual stream at the layer *input*, so for
//! every captured layer `hidden[l+1] = hidden[l] + attn_out[l] + mlp_out[l]`.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub mod container;
mod snkt;

pub use snkt::{trace_file_size, validate, write_trace, TraceReader, Violation, SNKT_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureField {
    Hidden,
    AttnOut,
    MlpOut,
    AttnWeights,
    KeyNorms,
    ValueNorms,
    MlpIntermediates,
}

impl CaptureField {
    pub const ALL: [CaptureField; 7] = [
        CaptureField::Hidden,
        CaptureField::AttnOut,
        CaptureField::MlpOut,
        CaptureField::AttnWeights,
        CaptureField::KeyNorms,
        CaptureField::ValueNorms,
        CaptureField::MlpIntermediates,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaptureField::Hidden => "hidden",
            CaptureField::AttnOut => "attn_out",
            CaptureField::MlpOut => "mlp_out",
            CaptureField::AttnWeights => "attn_weights",
            CaptureField::KeyNorms => "key_norms",
            CaptureField::ValueNorms => "value_norms",
            CaptureField::MlpIntermediates => "mlp_intermediates",
        }
    }
}

impl fmt::Display for CaptureField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CaptureField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaptureField::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown capture field `{s}`")))
    }
}

pub type CaptureSet = BTreeSet<CaptureField>;

/// Everything except the (large, optional) MLP intermediates.
pub fn default_capture() -> CaptureSet {
    CaptureField::ALL
        .into_iter()
        .filter(|c| *c != CaptureField::MlpIntermediates)
        .collect()
}

pub fn parse_capture_list(s: &str) -> Result<CaptureSet> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(CaptureField::from_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model_name: String,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub rope_base: f64,
    pub tokens: Vec<String>,
    pub captured: CaptureSet,
    /// Inner MLP width; required when `mlp_intermediates` are captured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_inner: Option<usize>,
}

impl TraceMeta {
    pub fn check(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_size == 0 || self.num_heads == 0 || self.seq_len == 0 {
            return Err(Error::Format(
                "num_layers, hidden_size, num_heads and seq_len must be positive".into(),
            ));
        }
        if self.hidden_size != self.num_heads * self.head_dim {
            return Err(Error::Format(format!(
                "hidden_size {} != num_heads {} * head_dim {}",
                self.hidden_size, self.num_heads, self.head_dim
            )));
        }
        if self.tokens.len() != self.seq_len {
            return Err(Error::Format(format!(
                "{} token strings for seq_len {}",
                self.tokens.len(),
                self.seq_len
            )));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::Format(format!("rope_base {} must be positive", self.rope_base)));
        }
        if self.captured.contains(&CaptureField::MlpIntermediates) && self.mlp_inner.unwrap_or(0) == 0 {
            return Err(Error::Format(
                "mlp_intermediates captured but mlp_inner is not set".into(),
            ));
        }
        Ok(())
    }

    pub fn has(&self, field: CaptureField) -> bool {
        self.captured.contains(&field)
    }

    /// Row width of the `mlp_intermediates` chunk: x, post_norm, gate_pre, up, gated.
    pub fn mlp_intermediate_width(&self) -> usize {
        2 * self.hidden_size + 3 * self.mlp_inner.unwrap_or(0)
    }
}

/// Per-layer captured tensors. Absent fields are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerRecord {
    pub hidden: Option<Matrix>,
    pub attn_out: Option<Matrix>,
    pub mlp_out: Option<Matrix>,
    /// One `T × T` row-stochastic, causally masked matrix per head.
    pub attn_weights: Option<Vec<Matrix>>,
    pub key_norms: Option<Vec<f64>>,
    pub value_norms: Option<Vec<f64>>,
    /// `T × (2h + 3m)` rows of `[x | post_norm | gate_pre | up | gated]`.
    pub mlp_intermediates: Option<Matrix>,
}

impl LayerRecord {
    pub fn hidden(&self) -> Result<&Matrix> {
        self.hidden.as_ref().ok_or(Error::MissingField("hidden"))
    }

    pub fn attn_out(&self) -> Result<&Matrix> {
        self.attn_out.as_ref().ok_or(Error::MissingField("attn_out"))
    }

    pub fn mlp_out(&self) -> Result<&Matrix> {
        self.mlp_out.as_ref().ok_or(Error::MissingField("mlp_out"))
    }

    pub fn attn_weights(&self) -> Result<&[Matrix]> {
        self.attn_weights
            .as_deref()
            .ok_or(Error::MissingField("attn_weights"))
    }

    pub fn mlp_intermediates(&self) -> Result<&Matrix> {
        self.mlp_intermediates
            .as_ref()
            .ok_or(Error::MissingField("mlp_intermediates"))
    }

    fn present(&self) -> CaptureSet {
        let mut s = CaptureSet::new();
        let mut add = |f, p: bool| {
            if p {
                s.insert(f);
            }
        };
        add(CaptureField::Hidden, self.hidden.is_some());
        add(CaptureField::AttnOut, self.attn_out.is_some());
        add(CaptureField::MlpOut, self.mlp_out.is_some());
        add(CaptureField::AttnWeights, self.attn_weights.is_some());
        add(CaptureField::KeyNorms, self.key_norms.is_some());
        add(CaptureField::ValueNorms, self.value_norms.is_some());
        add(CaptureField::MlpIntermediates, self.mlp_intermediates.is_some());
        s
    }

    /// Checks shapes against `meta` and that present fields match `captured`.
    pub fn check_shapes(&self, meta: &TraceMeta, layer: usize) -> Result<()> {
        let present = self.present();
        if present != meta.captured {
            return Err(Error::Format(format!(
                "layer {layer}: fields present {:?} differ from captured {:?}",
                present, meta.captured
            )));
        }
        let (t, h) = (meta.seq_len, meta.hidden_size);
        let want = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::Format(format!(
                    "layer {layer}: {name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        for (name, m) in [
            ("hidden", &self.hidden),
            ("attn_out", &self.attn_out),
            ("mlp_out", &self.mlp_out),
        ] {
            if let Some(m) = m {
                want(name, m, t, h)?;
            }
        }
        if let Some(heads) = &self.attn_weights {
            if heads.len() != meta.num_heads {
                return Err(Error::Format(format!(
                    "layer {layer}: {} attention heads, expected {}",
                    heads.len(),
                    meta.num_heads
                )));
            }
            for m in heads {
                want("attn_weights", m, t, t)?;
            }
        }
        for (name, v) in [("key_norms", &self.key_norms), ("value_norms", &self.value_norms)] {
            if let Some(v) = v {
                if v.len() != t {
                    return Err(Error::Format(format!(
                        "layer {layer}: {name} has length {}, expected {t}",
                        v.len()
                    )));
                }
            }
        }
        if let Some(m) = &self.mlp_intermediates {
            want("mlp_intermediates", m, t, meta.mlp_intermediate_width())?;
        }
        Ok(())
    }
}

/// A fully materialised trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub meta: TraceMeta,
    pub layers: Vec<LayerRecord>,
}

impl ActivationTrace {
    pub fn check(&self) -> Result<()> {
        self.meta.check()?;
        if self.layers.len() != self.meta.num_layers {
            return Err(Error::Format(format!(
                "{} layer records for num_layers {}",
                self.layers.len(),
                self.meta.num_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.check_shapes(&self.meta, i)?;
        }
        Ok(())
    }
}

/// Uniform access to a trace, whether in memory or lazily read from disk.
pub trait TraceAccess: Sync {
    fn meta(&self) -> &TraceMeta;

    fn layer(&self, index: usize) -> Result<Cow<'_, LayerRecord>>;

    /// Loads only one field of a layer; the default loads the whole record.
    fn layer_field(&self, index: usize, field: CaptureField) -> Result<Cow<'_, LayerRecord>> {
        let _ = field;
        self.layer(index)
    }

    fn num_layers(&self) -> usize {
        self.meta().num_layers
    }

    fn require(&self, field: CaptureField) -> Result<()> {
        if self.meta().has(field) {
            Ok(())
        } else {
            Err(Error::MissingField(field.name()))
        }
    }
}

impl TraceAccess for ActivationTrace {
    fn meta(&self) -> &TraceMeta {
        &self.meta
    }

    fn layer(&self, index: usize) -> Result<Cow<'_, LayerRecord>> {
        self.layers.get(index).map(Cow::Borrowed).ok_or_else(|| {
            Error::Index(format!("layer {index} of a {}-layer trace", self.layers.len()))
        })
    }
}
