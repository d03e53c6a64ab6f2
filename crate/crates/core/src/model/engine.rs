use serde::{Deserialize, Serialize};

use super::rope::{rope_frequencies, rope_rotate};
use super::{LayerWeights, ToyModelSpec};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix, Vector};
use crate::trace::{ActivationTrace, CaptureField, CaptureSet, LayerRecord, TraceMeta};

/// Activation site targeted by an [`Intervention`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// The residual stream at the layer input.
    Hidden,
    /// The attention module's contribution before the residual add.
    AttnOut,
    /// The MLP module's contribution before the residual add.
    MlpOut,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Hidden, Site::AttnOut, Site::MlpOut];

    pub fn name(self) -> &'static str {
        match self {
            Site::Hidden => "hidden",
            Site::AttnOut => "attn_out",
            Site::MlpOut => "mlp_out",
        }
    }
}

/// Replaces one activation row before it is consumed downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub layer: usize,
    pub position: usize,
    pub site: Site,
    pub replacement: Vector,
}

/// Everything an MLP computes for one input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpIntermediates {
    pub input: Vec<f64>,
    pub post_norm: Vec<f64>,
    pub gate_pre: Vec<f64>,
    pub up: Vec<f64>,
    pub gated: Vec<f64>,
    pub output: Vec<f64>,
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn rmsnorm_into(x: &[f64], scale: &[f64], eps: f64, out: &mut [f64]) {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, v), s) in out.iter_mut().zip(x).zip(scale) {
        *o = v * inv * s;
    }
}

/// Runs one layer's MLP path on `x`, with or without its pre-norm.
pub fn mlp_forward(layer: &LayerWeights, x: &[f64], eps: f64, apply_pre_norm: bool) -> MlpIntermediates {
    let mut post_norm = x.to_vec();
    if apply_pre_norm {
        rmsnorm_into(x, &layer.mlp_norm, eps, &mut post_norm);
    }
    let gate_pre = layer.w_gate.matvec(&post_norm);
    let up = layer.w_up.matvec(&post_norm);
    let gated: Vec<f64> = gate_pre.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
    let output = layer.w_down.matvec(&gated);
    MlpIntermediates {
        input: x.to_vec(),
        post_norm,
        gate_pre,
        up,
        gated,
        output,
    }
}

pub fn mlp_probe(model: &ToyModelSpec, layer: usize, v: &[f64], apply_pre_norm: bool) -> Result<MlpIntermediates> {
    let weights = model.layers.get(layer).ok_or_else(|| {
        Error::Index(format!("layer {layer} of a {}-layer model", model.config.num_layers))
    })?;
    if v.len() != model.config.hidden_size {
        return Err(Error::Shape(format!(
            "probe vector has dim {}, model hidden size is {}",
            v.len(),
            model.config.hidden_size
        )));
    }
    Ok(mlp_forward(weights, v, model.config.rmsnorm_eps, apply_pre_norm))
}

/// Full-precision activations of one layer, handed to the tap of [`run_forward`].
pub struct LayerActivations<'a> {
    pub layer: usize,
    /// Residual stream at the layer input, `T × h`.
    pub hidden: &'a Matrix,
    pub attn_out: &'a Matrix,
    /// One `T × T` matrix per head.
    pub attn_weights: &'a [Matrix],
    pub key_norms: &'a [f64],
    pub value_norms: &'a [f64],
    /// MLP input `hidden + attn_out`.
    pub mlp_in: &'a Matrix,
    pub mlp_post_norm: &'a Matrix,
    pub gate_pre: &'a Matrix,
    pub up: &'a Matrix,
    pub gated: &'a Matrix,
    pub mlp_out: &'a Matrix,
}

/// `input (T × in) ↦ input · Wᵀ (T × out)`
fn linear(input: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(input.rows(), w.rows());
    for t in 0..input.rows() {
        let x = input.row(t);
        for (o, wr) in out.row_mut(t).iter_mut().zip(w.row_iter()) {
            *o = dot(wr, x);
        }
    }
    out
}

fn check_rows(m: &Matrix, layer: usize, site: &'static str) -> Result<()> {
    for t in 0..m.rows() {
        if m.row(t).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics {
                layer,
                position: t,
                site,
            });
        }
    }
    Ok(())
}

fn apply_interventions(m: &mut Matrix, layer: usize, site: Site, interventions: &[Intervention]) {
    for iv in interventions.iter().filter(|iv| iv.layer == layer && iv.site == site) {
        m.row_mut(iv.position).copy_from_slice(&iv.replacement);
    }
}

/// Causal forward pass calling `tap` once per layer with that layer's
/// activations. Returns the residual stream after the last layer.
pub fn run_forward<F>(
    model: &ToyModelSpec,
    token_ids: &[usize],
    interventions: &[Intervention],
    mut tap: F,
) -> Result<Matrix>
where
    F: FnMut(&LayerActivations<'_>) -> Result<()>,
{
    let cfg = &model.config;
    let (t_len, h, n_heads, hd) = (token_ids.len(), cfg.hidden_size, cfg.num_heads, cfg.head_dim);
    if t_len == 0 {
        return Err(Error::Shape("empty token sequence".into()));
    }
    for iv in interventions {
        if iv.layer >= cfg.num_layers || iv.position >= t_len {
            return Err(Error::Index(format!(
                "intervention at layer {}, position {} outside {} layers x {} positions",
                iv.layer, iv.position, cfg.num_layers, t_len
            )));
        }
        if iv.replacement.dim() != h {
            return Err(Error::Shape(format!(
                "intervention replacement has dim {}, expected {h}",
                iv.replacement.dim()
            )));
        }
    }
    let freqs = rope_frequencies(hd, cfg.rope_base)?;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut residual = Matrix::zeros(t_len, h);
    for (t, &id) in token_ids.iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(Error::Index(format!(
                "token id {id} at position {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        residual.row_mut(t).copy_from_slice(model.embedding.row(id));
    }

    let mut normed = Matrix::zeros(t_len, h);
    let mut weights: Vec<Matrix> = (0..n_heads).map(|_| Matrix::zeros(t_len, t_len)).collect();
    let mut scores = vec![0.0; t_len];
    for (l, lw) in model.layers.iter().enumerate() {
        apply_interventions(&mut residual, l, Site::Hidden, interventions);
        check_rows(&residual, l, "hidden")?;

        for t in 0..t_len {
            rmsnorm_into(residual.row(t), &lw.attn_norm, cfg.rmsnorm_eps, normed.row_mut(t));
        }
        let mut q = linear(&normed, &lw.w_q);
        let mut k = linear(&normed, &lw.w_k);
        let v = linear(&normed, &lw.w_v);
        for t in 0..t_len {
            for head in 0..n_heads {
                rope_rotate(&mut q.row_mut(t)[head * hd..(head + 1) * hd], t, &freqs);
                rope_rotate(&mut k.row_mut(t)[head * hd..(head + 1) * hd], t, &freqs);
            }
        }
        let key_norms: Vec<f64> = k.row_iter().map(norm).collect();
        let value_norms: Vec<f64> = v.row_iter().map(norm).collect();

        let mut mixed = Matrix::zeros(t_len, h);
        for (head, w) in weights.iter_mut().enumerate() {
            let span = head * hd..(head + 1) * hd;
            for t in 0..t_len {
                let qt = &q.row(t)[span.clone()];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores[..=t].iter_mut().enumerate() {
                    *s = dot(qt, &k.row(j)[span.clone()]) * scale;
                    max = max.max(*s);
                }
                if !max.is_finite() {
                    return Err(Error::Numerics {
                        layer: l,
                        position: t,
                        site: "attn_logits",
                    });
                }
                let mut z = 0.0;
                for s in scores[..=t].iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let row = w.row_mut(t);
                for (j, dst) in row.iter_mut().enumerate() {
                    *dst = if j <= t { scores[j] / z } else { 0.0 };
                }
                let out = &mut mixed.row_mut(t)[span.clone()];
                for (j, &a) in row[..=t].iter().enumerate() {
                    if a != 0.0 {
                        for (o, vv) in out.iter_mut().zip(&v.row(j)[span.clone()]) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }
        let mut attn_out = linear(&mixed, &lw.w_o);
        apply_interventions(&mut attn_out, l, Site::AttnOut, interventions);
        check_rows(&attn_out, l, "attn_out")?;

        let mut mlp_in = residual.clone();
        for (a, b) in mlp_in.data_mut().iter_mut().zip(attn_out.data()) {
            *a += b;
        }
        let mut post = Matrix::zeros(t_len, h);
        for t in 0..t_len {
            rmsnorm_into(mlp_in.row(t), &lw.mlp_norm, cfg.rmsnorm_eps, post.row_mut(t));
        }
        let gate_pre = linear(&post, &lw.w_gate);
        let up = linear(&post, &lw.w_up);
        let mut gated = gate_pre.clone();
        for (g, u) in gated.data_mut().iter_mut().zip(up.data()) {
            *g = silu(*g) * u;
        }
        let mut mlp_out = linear(&gated, &lw.w_down);
        apply_interventions(&mut mlp_out, l, Site::MlpOut, interventions);
        check_rows(&mlp_out, l, "mlp_out")?;

        tap(&LayerActivations {
            layer: l,
            hidden: &residual,
            attn_out: &attn_out,
            attn_weights: &weights,
            key_norms: &key_norms,
            value_norms: &value_norms,
            mlp_in: &mlp_in,
            mlp_post_norm: &post,
            gate_pre: &gate_pre,
            up: &up,
            gated: &gated,
            mlp_out: &mlp_out,
        })?;

        for (r, (a, f)) in residual
            .data_mut()
            .iter_mut()
            .zip(mlp_in.data().iter().zip(mlp_out.data()))
        {
            *r = a + f;
        }
        check_rows(&residual, l, "residual")?;
    }
    Ok(residual)
}

/// Rounds to `f32` precision; values beyond the `f32` range are a numerics error.
fn to_f32_matrix(m: &Matrix, layer: usize, site: &'static str) -> Result<Matrix> {
    let data: Vec<f64> = m.data().iter().map(|&v| v as f32 as f64).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerics {
            layer,
            position: i / m.cols().max(1),
            site,
        });
    }
    Matrix::new(m.rows(), m.cols(), data)
}

fn to_f32_vec(v: &[f64], layer: usize, site: &'static str) -> Result<Vec<f64>> {
    let out: Vec<f64> = v.iter().map(|&x| x as f32 as f64).collect();
    match out.iter().position(|v| !v.is_finite()) {
        Some(position) => Err(Error::Numerics { layer, position, site }),
        None => Ok(out),
    }
}

/// Runs the model and records the requested fields at `f32` precision.
pub fn forward_with_capture(
    model: &ToyModelSpec,
    token_ids: &[usize],
    capture: &CaptureSet,
    interventions: &[Intervention],
) -> Result<ActivationTrace> {
    let cfg = &model.config;
    let tokens = model.token_strings(token_ids)?;
    let meta = TraceMeta {
        model_name: cfg.name.clone(),
        num_layers: cfg.num_layers,
        hidden_size: cfg.hidden_size,
        num_heads: cfg.num_heads,
        head_dim: cfg.head_dim,
        seq_len: token_ids.len(),
        rope_base: cfg.rope_base,
        tokens,
        captured: capture.clone(),
        mlp_inner: capture
            .contains(&CaptureField::MlpIntermediates)
            .then_some(cfg.mlp_inner),
    };
    let mut layers = Vec::with_capacity(cfg.num_layers);
    run_forward(model, token_ids, interventions, |acts| {
        let l = acts.layer;
        let has = |f| capture.contains(&f);
        let mut rec = LayerRecord::default();
        if has(CaptureField::Hidden) {
            rec.hidden = Some(to_f32_matrix(acts.hidden, l, "hidden")?);
        }
        if has(CaptureField::AttnOut) {
            rec.attn_out = Some(to_f32_matrix(acts.attn_out, l, "attn_out")?);
        }
        if has(CaptureField::MlpOut) {
            rec.mlp_out = Some(to_f32_matrix(acts.mlp_out, l, "mlp_out")?);
        }
        if has(CaptureField::AttnWeights) {
            rec.attn_weights = Some(
                acts.attn_weights
                    .iter()
                    .map(|w| to_f32_matrix(w, l, "attn_weights"))
                    .collect::<Result<_>>()?,
            );
        }
        if has(CaptureField::KeyNorms) {
            rec.key_norms = Some(to_f32_vec(acts.key_norms, l, "key_norms")?);
        }
        if has(CaptureField::ValueNorms) {
            rec.value_norms = Some(to_f32_vec(acts.value_norms, l, "value_norms")?);
        }
        if has(CaptureField::MlpIntermediates) {
            let t_len = acts.hidden.rows();
            let width = 2 * cfg.hidden_size + 3 * cfg.mlp_inner;
            let mut data = Vec::with_capacity(t_len * width);
            for t in 0..t_len {
                for part in [acts.mlp_in, acts.mlp_post_norm, acts.gate_pre, acts.up, acts.gated] {
                    data.extend_from_slice(part.row(t));
                }
            }
            rec.mlp_intermediates = Some(to_f32_matrix(&Matrix::new(t_len, width, data)?, l, "mlp_intermediates")?);
        }
        layers.push(rec);
        Ok(())
    })?;
    Ok(ActivationTrace { meta, layers })
}
