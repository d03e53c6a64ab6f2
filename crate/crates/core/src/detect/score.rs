use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::trace::{CaptureField, TraceAccess};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelection {
    Head(usize),
    /// Mean over the `H` heads `0..H`.
    All,
}

/// Mean attention that queries `t ≥ k` pay to key `k` in one head.
pub(crate) fn head_score(weights: &Matrix, k: usize) -> f64 {
    let t_len = weights.rows();
    let sum: f64 = (k..t_len).map(|t| weights[(t, k)]).sum();
    sum / (t_len - k) as f64
}

fn check_position(k: usize, t_len: usize) -> Result<()> {
    if k >= t_len {
        return Err(Error::Index(format!("key position {k} in a sequence of length {t_len}")));
    }
    Ok(())
}

/// Sink-score of key position `k` at `layer`.
pub fn sink_score<T: TraceAccess + ?Sized>(trace: &T, k: usize, layer: usize, head: HeadSelection) -> Result<f64> {
    trace.require(CaptureField::AttnWeights)?;
    let meta = trace.meta();
    check_position(k, meta.seq_len)?;
    if layer >= meta.num_layers {
        return Err(Error::Index(format!("layer {layer} of a {}-layer trace", meta.num_layers)));
    }
    let rec = trace.layer_field(layer, CaptureField::AttnWeights)?;
    let heads = rec.attn_weights()?;
    match head {
        HeadSelection::Head(h) => {
            let w = heads
                .get(h)
                .ok_or_else(|| Error::Index(format!("head {h} of {}", heads.len())))?;
            Ok(head_score(w, k))
        }
        HeadSelection::All => Ok(heads.iter().map(|w| head_score(w, k)).sum::<f64>() / heads.len() as f64),
    }
}

/// Sink-scores for a set of key positions at every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkScoreTable {
    pub positions: Vec<usize>,
    /// `[layer][position index]`, head-averaged.
    pub scores: Vec<Vec<f64>>,
    /// `[layer][position index][head]`
    pub per_head: Vec<Vec<Vec<f64>>>,
}

impl SinkScoreTable {
    pub fn score(&self, layer: usize, position: usize) -> Option<f64> {
        let i = self.positions.iter().position(|&p| p == position)?;
        self.scores.get(layer).map(|row| row[i])
    }

    /// Head-averaged depth profile of one position.
    pub fn profile(&self, position: usize) -> Option<Vec<f64>> {
        let i = self.positions.iter().position(|&p| p == position)?;
        Some(self.scores.iter().map(|row| row[i]).collect())
    }
}

pub fn sink_score_table<T: TraceAccess + ?Sized>(trace: &T, positions: &[usize]) -> Result<SinkScoreTable> {
    trace.require(CaptureField::AttnWeights)?;
    let t_len = trace.meta().seq_len;
    for &k in positions {
        check_position(k, t_len)?;
    }
    let mut scores = Vec::with_capacity(trace.num_layers());
    let mut per_head = Vec::with_capacity(trace.num_layers());
    for l in 0..trace.num_layers() {
        let rec = trace.layer_field(l, CaptureField::AttnWeights)?;
        let heads = rec.attn_weights()?;
        let ph: Vec<Vec<f64>> = positions
            .iter()
            .map(|&k| heads.iter().map(|w| head_score(w, k)).collect())
            .collect();
        scores.push(ph.iter().map(|h| h.iter().sum::<f64>() / h.len() as f64).collect());
        per_head.push(ph);
    }
    Ok(SinkScoreTable {
        positions: positions.to_vec(),
        scores,
        per_head,
    })
}
