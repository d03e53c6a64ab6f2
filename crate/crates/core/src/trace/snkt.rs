use std::borrow::Cow;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::container::{
    decode_f32, encode_f32, read_preamble, ByteSource, ChunkEntry, Container, Header, PendingChunk,
    FORMAT_VERSION, PREAMBLE_LEN,
};
use super::{ActivationTrace, CaptureField, LayerRecord, TraceAccess, TraceMeta};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const SNKT_MAGIC: &[u8; 4] = b"SNKT";

/// Tolerance on attention row sums, matching f32 storage.
const ROW_SUM_TOL: f64 = 1e-4;
/// Cap on per-chunk row violations so a garbage file does not flood the report.
const MAX_ROW_VIOLATIONS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ChunkKey {
    layer: usize,
    field: CaptureField,
    head: Option<usize>,
    rows: usize,
    cols: usize,
}

impl ChunkKey {
    fn bytes(&self) -> u64 {
        (self.rows * self.cols * 4) as u64
    }
}

/// Chunks in file order.
fn layout(meta: &TraceMeta) -> Vec<ChunkKey> {
    let (t, h) = (meta.seq_len, meta.hidden_size);
    let mut keys = Vec::new();
    for layer in 0..meta.num_layers {
        let mut push = |field, head, rows, cols| {
            keys.push(ChunkKey {
                layer,
                field,
                head,
                rows,
                cols,
            })
        };
        for field in [CaptureField::Hidden, CaptureField::AttnOut, CaptureField::MlpOut] {
            if meta.has(field) {
                push(field, None, t, h);
            }
        }
        if meta.has(CaptureField::AttnWeights) {
            for head in 0..meta.num_heads {
                push(CaptureField::AttnWeights, Some(head), t, t);
            }
        }
        for field in [CaptureField::KeyNorms, CaptureField::ValueNorms] {
            if meta.has(field) {
                push(field, None, 1, t);
            }
        }
        if meta.has(CaptureField::MlpIntermediates) {
            push(CaptureField::MlpIntermediates, None, t, meta.mlp_intermediate_width());
        }
    }
    keys
}

/// Total container size for `meta` given the serialized header length.
pub fn trace_file_size(meta: &TraceMeta, header_len: u64) -> u64 {
    PREAMBLE_LEN + header_len + layout(meta).iter().map(ChunkKey::bytes).sum::<u64>()
}

fn chunk_values<'a>(record: &'a LayerRecord, key: &ChunkKey) -> &'a [f64] {
    match key.field {
        CaptureField::Hidden => record.hidden.as_ref().map(Matrix::data),
        CaptureField::AttnOut => record.attn_out.as_ref().map(Matrix::data),
        CaptureField::MlpOut => record.mlp_out.as_ref().map(Matrix::data),
        CaptureField::AttnWeights => record
            .attn_weights
            .as_ref()
            .map(|w| w[key.head.unwrap_or(0)].data()),
        CaptureField::KeyNorms => record.key_norms.as_deref(),
        CaptureField::ValueNorms => record.value_norms.as_deref(),
        CaptureField::MlpIntermediates => record.mlp_intermediates.as_ref().map(Matrix::data),
    }
    .unwrap_or(&[])
}

/// Serializes `trace` as an `SNKT` container and returns the byte count.
///
/// Shapes are checked before anything is written.
pub fn write_trace<W: Write>(trace: &ActivationTrace, sink: &mut W) -> Result<u64> {
    trace.check()?;
    let keys = layout(&trace.meta);
    let chunks: Vec<PendingChunk<'_>> = keys
        .iter()
        .map(|key| {
            let values = chunk_values(&trace.layers[key.layer], key);
            PendingChunk {
                layer: Some(key.layer),
                field: key.field.name(),
                head: key.head,
                len: key.bytes(),
                encode: Box::new(move |out: &mut Vec<u8>| encode_f32(values.iter().copied(), out)),
            }
        })
        .collect();
    super::container::write_container(SNKT_MAGIC, &trace.meta, &chunks, sink)
}

/// Lazily reads layers from an `SNKT` container.
pub struct TraceReader<S> {
    container: Container<S, TraceMeta>,
}

impl<S: ByteSource> TraceReader<S> {
    pub fn open(source: S) -> Result<Self> {
        let container = Container::<S, TraceMeta>::open(source, SNKT_MAGIC)?;
        container.meta().check()?;
        let reader = Self { container };
        for key in layout(reader.meta()) {
            let entry = reader.entry(&key)?;
            if entry.length != key.bytes() {
                return Err(Error::Format(format!(
                    "layer {} {} chunk is {} bytes, expected {}",
                    key.layer,
                    entry.label(),
                    entry.length,
                    key.bytes()
                )));
            }
        }
        Ok(reader)
    }

    pub fn source(&self) -> &S {
        self.container.source()
    }

    fn entry(&self, key: &ChunkKey) -> Result<&ChunkEntry> {
        self.container
            .find(Some(key.layer), key.field.name(), key.head)
            .ok_or_else(|| {
                Error::Format(format!(
                    "chunk index has no entry for layer {} field {}{}",
                    key.layer,
                    key.field,
                    key.head.map(|h| format!(" head {h}")).unwrap_or_default()
                ))
            })
    }

    fn read_key(&self, key: &ChunkKey) -> Result<Matrix> {
        let bytes = self.container.read_chunk(self.entry(key)?)?;
        let values = decode_f32(&bytes);
        Matrix::new(key.rows, key.cols, values).map_err(|e| Error::Integrity {
            layer: Some(key.layer),
            field: key.field.name().to_string(),
            reason: e.to_string(),
        })
    }

    fn read_fields(&self, index: usize, only: Option<CaptureField>) -> Result<LayerRecord> {
        let meta = self.meta();
        if index >= meta.num_layers {
            return Err(Error::Index(format!(
                "layer {index} of a {}-layer trace",
                meta.num_layers
            )));
        }
        let mut rec = LayerRecord::default();
        for key in layout(meta).into_iter().filter(|k| k.layer == index) {
            if only.is_some_and(|f| f != key.field) {
                continue;
            }
            let m = self.read_key(&key)?;
            match key.field {
                CaptureField::Hidden => rec.hidden = Some(m),
                CaptureField::AttnOut => rec.attn_out = Some(m),
                CaptureField::MlpOut => rec.mlp_out = Some(m),
                CaptureField::AttnWeights => rec.attn_weights.get_or_insert_with(Vec::new).push(m),
                CaptureField::KeyNorms => rec.key_norms = Some(m.into_data()),
                CaptureField::ValueNorms => rec.value_norms = Some(m.into_data()),
                CaptureField::MlpIntermediates => rec.mlp_intermediates = Some(m),
            }
        }
        Ok(rec)
    }

    /// Reads one layer's record, touching only that layer's chunks.
    pub fn read_layer(&self, index: usize) -> Result<LayerRecord> {
        self.read_fields(index, None)
    }

    pub fn load_all(&self) -> Result<ActivationTrace> {
        let layers = (0..self.meta().num_layers)
            .map(|i| self.read_layer(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(ActivationTrace {
            meta: self.meta().clone(),
            layers,
        })
    }
}

impl<S: ByteSource> TraceAccess for TraceReader<S> {
    fn meta(&self) -> &TraceMeta {
        self.container.meta()
    }

    fn layer(&self, index: usize) -> Result<Cow<'_, LayerRecord>> {
        self.read_layer(index).map(Cow::Owned)
    }

    fn layer_field(&self, index: usize, field: CaptureField) -> Result<Cow<'_, LayerRecord>> {
        self.read_fields(index, Some(field)).map(Cow::Owned)
    }
}

/// One problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    pub message: String,
}

impl Violation {
    pub fn general(message: impl Into<String>) -> Self {
        Self {
            layer: None,
            field: None,
            head: None,
            row: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.layer {
            write!(f, "layer {l}: ")?;
        }
        if let Some(field) = &self.field {
            write!(f, "{field}: ")?;
        }
        if let Some(h) = self.head {
            write!(f, "head {h}: ")?;
        }
        if let Some(r) = self.row {
            write!(f, "row {r}: ")?;
        }
        f.write_str(&self.message)
    }
}

/// Checks an `SNKT` source for structural and numerical consistency.
///
/// An empty list means the container is valid. Only an unreadable source is
/// an error.
pub fn validate<S: ByteSource + ?Sized>(source: &S) -> Result<Vec<Violation>> {
    let total = source.size()?;
    if total < PREAMBLE_LEN {
        return Ok(vec![Violation::general(format!(
            "truncated preamble: file is {total} bytes"
        ))]);
    }
    let pre = read_preamble(source)?;
    if &pre.magic != SNKT_MAGIC {
        return Ok(vec![Violation::general("bad magic")]);
    }
    if pre.version != FORMAT_VERSION {
        return Ok(vec![Violation::general(format!(
            "unsupported version {}",
            pre.version
        ))]);
    }
    if pre.header_len > total - PREAMBLE_LEN {
        return Ok(vec![Violation::general(format!(
            "header length {} exceeds file size {total}",
            pre.header_len
        ))]);
    }
    let mut raw = vec![0u8; pre.header_len as usize];
    source.read_exact_at(&mut raw, PREAMBLE_LEN)?;
    let header: Header<TraceMeta> = match serde_json::from_slice(&raw) {
        Ok(h) => h,
        Err(e) => return Ok(vec![Violation::general(format!("unreadable header: {e}"))]),
    };
    if let Err(e) = header.meta.check() {
        return Ok(vec![Violation::general(e.to_string())]);
    }

    let mut out = Vec::new();
    let payload_start = PREAMBLE_LEN + pre.header_len;
    let payload_len = total - payload_start;
    let keys = layout(&header.meta);
    let t = header.meta.seq_len;

    for entry in &header.chunks {
        let known = keys.iter().any(|k| {
            Some(k.layer) == entry.layer && k.field.name() == entry.field && k.head == entry.head
        });
        if !known {
            out.push(Violation {
                layer: entry.layer,
                field: Some(entry.label()),
                head: entry.head,
                row: None,
                message: "chunk not expected from the captured fields".into(),
            });
        }
    }

    let mut payload_end = 0u64;
    for key in &keys {
        let at = |message: String| Violation {
            layer: Some(key.layer),
            field: Some(key.field.name().to_string()),
            head: key.head,
            row: None,
            message,
        };
        let Some(entry) = header.chunks.iter().find(|c| {
            c.layer == Some(key.layer) && c.field == key.field.name() && c.head == key.head
        }) else {
            out.push(at("missing from chunk index".into()));
            continue;
        };
        if entry.length != key.bytes() {
            out.push(at(format!(
                "chunk is {} bytes, shape requires {}",
                entry.length,
                key.bytes()
            )));
            continue;
        }
        if entry.offset.checked_add(entry.length).is_none_or(|e| e > payload_len) {
            out.push(at(format!(
                "chunk [{}, +{}) extends past end of payload ({payload_len} bytes)",
                entry.offset, entry.length
            )));
            continue;
        }
        payload_end = payload_end.max(entry.offset + entry.length);
        let mut buf = vec![0u8; entry.length as usize];
        source.read_exact_at(&mut buf, payload_start + entry.offset)?;
        if crc32fast::hash(&buf) != entry.crc32 {
            out.push(at("checksum mismatch".into()));
            continue;
        }
        let values = decode_f32(&buf);
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            out.push(at(format!("non-finite value at flat index {i}")));
            continue;
        }
        if key.field == CaptureField::AttnWeights {
            let mut reported = 0;
            for (row, r) in values.chunks_exact(t).enumerate() {
                let problem = if let Some(k) = r[row + 1..].iter().position(|&v| v != 0.0) {
                    Some(format!("causal mask violated at key {}", row + 1 + k))
                } else if let Some(k) = r.iter().position(|&v| v < 0.0) {
                    Some(format!("negative weight at key {k}"))
                } else {
                    let sum: f64 = r.iter().sum();
                    ((sum - 1.0).abs() > ROW_SUM_TOL).then(|| format!("row sums to {sum}"))
                };
                if let Some(message) = problem {
                    reported += 1;
                    if reported <= MAX_ROW_VIOLATIONS {
                        out.push(Violation {
                            row: Some(row),
                            ..at(message)
                        });
                    }
                }
            }
            if reported > MAX_ROW_VIOLATIONS {
                out.push(at(format!(
                    "{} further row violations suppressed",
                    reported - MAX_ROW_VIOLATIONS
                )));
            }
        }
        if matches!(key.field, CaptureField::KeyNorms | CaptureField::ValueNorms)
            && values.iter().any(|&v| v < 0.0)
        {
            out.push(at("negative norm".into()));
        }
    }
    if payload_end < payload_len {
        out.push(Violation::general(format!(
            "{} trailing bytes after the last chunk",
            payload_len - payload_end
        )));
    }
    Ok(out)
}
