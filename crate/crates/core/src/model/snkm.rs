//! `SNKM` weight container: the `SNKT` chunk scheme with a [`ModelConfig`]
//! header and `f64` little-endian payloads, so a saved model reproduces
//! calibrated planted weights exactly.

use std::io::Write;

use super::{LayerWeights, ModelConfig, ToyModelSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::trace::container::{
    decode_f64, encode_f64, read_preamble, ByteSource, Container, Header, PendingChunk, FORMAT_VERSION,
    PREAMBLE_LEN,
};
use crate::trace::Violation;

pub const SNKM_MAGIC: &[u8; 4] = b"SNKM";

fn shapes(cfg: &ModelConfig) -> Vec<(Option<usize>, &'static str, usize, usize)> {
    let (h, m) = (cfg.hidden_size, cfg.mlp_inner);
    let mut out = vec![(None, "embedding", cfg.vocab_size, h)];
    for l in 0..cfg.num_layers {
        out.extend([
            (Some(l), "w_q", h, h),
            (Some(l), "w_k", h, h),
            (Some(l), "w_v", h, h),
            (Some(l), "w_o", h, h),
            (Some(l), "w_gate", m, h),
            (Some(l), "w_up", m, h),
            (Some(l), "w_down", h, m),
            (Some(l), "attn_norm", 1, h),
            (Some(l), "mlp_norm", 1, h),
        ]);
    }
    out
}

fn values<'a>(model: &'a ToyModelSpec, layer: Option<usize>, field: &str) -> &'a [f64] {
    let Some(l) = layer else {
        return model.embedding.data();
    };
    let lw = &model.layers[l];
    match field {
        "attn_norm" => &lw.attn_norm,
        "mlp_norm" => &lw.mlp_norm,
        name => lw
            .matrices()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, m)| m.data())
            .unwrap_or(&[]),
    }
}

pub fn write_model<W: Write>(model: &ToyModelSpec, sink: &mut W) -> Result<u64> {
    model.check()?;
    let chunks: Vec<PendingChunk<'_>> = shapes(&model.config)
        .into_iter()
        .map(|(layer, field, r, c)| {
            let data = values(model, layer, field);
            PendingChunk {
                layer,
                field,
                head: None,
                len: (r * c * 8) as u64,
                encode: Box::new(move |out: &mut Vec<u8>| encode_f64(data, out)),
            }
        })
        .collect();
    crate::trace::container::write_container(SNKM_MAGIC, &model.config, &chunks, sink)
}

pub fn read_model<S: ByteSource>(source: S) -> Result<ToyModelSpec> {
    let container = Container::<S, ModelConfig>::open(source, SNKM_MAGIC)?;
    let cfg = container.meta().clone();
    cfg.check().map_err(|e| Error::Format(e.to_string()))?;
    let mut model = ToyModelSpec::zeros(cfg.clone())?;
    for (layer, field, r, c) in shapes(&cfg) {
        let entry = container.find(layer, field, None).ok_or_else(|| {
            Error::Format(format!("model chunk index has no entry for layer {layer:?} field {field}"))
        })?;
        if entry.length != (r * c * 8) as u64 {
            return Err(Error::Format(format!(
                "model chunk {field} of layer {layer:?} is {} bytes, expected {}",
                entry.length,
                r * c * 8
            )));
        }
        let data = decode_f64(&container.read_chunk(entry)?);
        let mat = Matrix::new(r, c, data).map_err(|e| Error::Integrity {
            layer,
            field: field.to_string(),
            reason: e.to_string(),
        })?;
        match (layer, field) {
            (None, _) => model.embedding = mat,
            (Some(l), name) => {
                let lw: &mut LayerWeights = &mut model.layers[l];
                match name {
                    "w_q" => lw.w_q = mat,
                    "w_k" => lw.w_k = mat,
                    "w_v" => lw.w_v = mat,
                    "w_o" => lw.w_o = mat,
                    "w_gate" => lw.w_gate = mat,
                    "w_up" => lw.w_up = mat,
                    "w_down" => lw.w_down = mat,
                    "attn_norm" => lw.attn_norm = mat.into_data(),
                    _ => lw.mlp_norm = mat.into_data(),
                }
            }
        }
    }
    model.check()?;
    Ok(model)
}

/// Structural check of an `SNKM` source, mirroring `trace::validate`.
pub fn validate_model<S: ByteSource + ?Sized>(source: &S) -> Result<Vec<Violation>> {
    let total = source.size()?;
    if total < PREAMBLE_LEN {
        return Ok(vec![Violation::general(format!(
            "truncated preamble: file is {total} bytes"
        ))]);
    }
    let pre = read_preamble(source)?;
    if &pre.magic != SNKM_MAGIC {
        return Ok(vec![Violation::general("bad magic")]);
    }
    if pre.version != FORMAT_VERSION {
        return Ok(vec![Violation::general(format!("unsupported version {}", pre.version))]);
    }
    if pre.header_len > total - PREAMBLE_LEN {
        return Ok(vec![Violation::general("header length exceeds file size")]);
    }
    let mut raw = vec![0u8; pre.header_len as usize];
    source.read_exact_at(&mut raw, PREAMBLE_LEN)?;
    let header: Header<ModelConfig> = match serde_json::from_slice(&raw) {
        Ok(h) => h,
        Err(e) => return Ok(vec![Violation::general(format!("unreadable header: {e}"))]),
    };
    if let Err(e) = header.meta.check() {
        return Ok(vec![Violation::general(e.to_string())]);
    }
    let payload_start = PREAMBLE_LEN + pre.header_len;
    let payload_len = total - payload_start;
    let mut out = Vec::new();
    for (layer, field, r, c) in shapes(&header.meta) {
        let at = |message: String| Violation {
            layer,
            field: Some(field.to_string()),
            head: None,
            row: None,
            message,
        };
        let Some(entry) = header.chunks.iter().find(|e| e.layer == layer && e.field == field) else {
            out.push(at("missing from chunk index".into()));
            continue;
        };
        let want = (r * c * 8) as u64;
        if entry.length != want {
            out.push(at(format!("chunk is {} bytes, shape requires {want}", entry.length)));
            continue;
        }
        if entry.offset.checked_add(entry.length).is_none_or(|e| e > payload_len) {
            out.push(at("chunk extends past end of payload".into()));
            continue;
        }
        let mut buf = vec![0u8; entry.length as usize];
        source.read_exact_at(&mut buf, payload_start + entry.offset)?;
        if crc32fast::hash(&buf) != entry.crc32 {
            out.push(at("checksum mismatch".into()));
        } else if decode_f64(&buf).iter().any(|v| !v.is_finite()) {
            out.push(at("non-finite weight".into()));
        }
    }
    Ok(out)
}
