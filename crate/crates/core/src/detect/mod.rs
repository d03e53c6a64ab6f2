//! Sink detection: per-layer membership, run extraction into
//! `(l_start, lifetime)` pairs, primary/secondary classification, sink
//! levels, sink-scores and token/position statistics.
//!
//! A position `t > 0` is a sink at layer `l` when its hidden state is
//! aligned with the reference (the BOS hidden state by default) above
//! `tau_cos` *and* its norm exceeds `norm_ratio_gate` times the median
//! non-BOS norm at that layer. BOS itself only has to pass the norm gate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, cosine_similarity, median, norm};
use crate::trace::{CaptureField, TraceAccess, TraceMeta};

mod levels;
mod score;
mod stats;

pub use levels::{classify_levels, SinkLevel};
pub use score::{sink_score, sink_score_table, HeadSelection, SinkScoreTable};
pub use stats::{sink_statistics, PositionHistogram, SinkStatistics, TokenShare};

/// Direction that sink candidates are compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "positions")]
pub enum Reference {
    /// Hidden state of position 0.
    Bos,
    /// Mean hidden state of the listed positions (e.g. known primary sinks).
    MeanOf(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub tau_cos: f64,
    pub norm_ratio_gate: f64,
    pub min_run: usize,
    pub primary_slack: usize,
    pub level_merge_l_start: usize,
    pub level_merge_lifetime: usize,
    pub reference: Reference,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            tau_cos: 0.95,
            norm_ratio_gate: 5.0,
            min_run: 2,
            primary_slack: 1,
            level_merge_l_start: 1,
            level_merge_lifetime: 2,
            reference: Reference::Bos,
        }
    }
}

impl DetectorConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.tau_cos > 0.0 && self.tau_cos < 1.0) {
            return Err(Error::Config(format!("tau_cos {} must lie in (0, 1)", self.tau_cos)));
        }
        if !(self.norm_ratio_gate >= 1.0) {
            return Err(Error::Config(format!(
                "norm_ratio_gate {} must be at least 1",
                self.norm_ratio_gate
            )));
        }
        if self.min_run == 0 {
            return Err(Error::Config("min_run must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sink membership at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDetection {
    pub layer: usize,
    /// Sorted sink positions.
    pub positions: Vec<usize>,
    /// `‖h_t‖ / median` for each entry of `positions`.
    pub norm_ratios: Vec<f64>,
    pub median_norm: f64,
}

impl LayerDetection {
    pub fn contains(&self, position: usize) -> bool {
        self.positions.binary_search(&position).is_ok()
    }

    fn ratio_of(&self, position: usize) -> Option<f64> {
        self.positions
            .binary_search(&position)
            .ok()
            .map(|i| self.norm_ratios[i])
    }
}

/// Applies the detector to one layer's hidden states (`T` rows).
pub fn detect_layer(layer: usize, hidden: &crate::linalg::Matrix, cfg: &DetectorConfig) -> Result<LayerDetection> {
    let t_len = hidden.rows();
    let norms: Vec<f64> = hidden.row_iter().map(norm).collect();
    let empty = LayerDetection {
        layer,
        positions: Vec::new(),
        norm_ratios: Vec::new(),
        median_norm: 0.0,
    };
    let Some(med) = median(&norms[1.min(t_len)..]) else {
        return Ok(empty);
    };
    let reference: Vec<f64> = match &cfg.reference {
        Reference::Bos => hidden.row(0).to_vec(),
        Reference::MeanOf(ps) => {
            let mut acc = vec![0.0; hidden.cols()];
            let ps: Vec<usize> = ps.iter().copied().filter(|&p| p < t_len).collect();
            for &p in &ps {
                axpy(1.0 / ps.len() as f64, hidden.row(p), &mut acc);
            }
            acc
        }
    };
    let gate = cfg.norm_ratio_gate * med;
    let mut positions = Vec::new();
    let mut norm_ratios = Vec::new();
    let ratio = |n: f64| if med > 0.0 { n / med } else { f64::INFINITY };
    if norms[0] > gate {
        positions.push(0);
        norm_ratios.push(ratio(norms[0]));
    }
    for t in 1..t_len {
        if norms[t] <= gate {
            continue;
        }
        match cosine_similarity(hidden.row(t), &reference) {
            Ok(c) if c > cfg.tau_cos => {
                positions.push(t);
                norm_ratios.push(ratio(norms[t]));
            }
            Ok(_) | Err(Error::DegenerateVector(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(LayerDetection {
        layer,
        positions,
        norm_ratios,
        median_norm: med,
    })
}

/// Per-layer sink sets for a whole trace.
pub fn detect_sinks_per_layer<T: TraceAccess + ?Sized>(trace: &T, cfg: &DetectorConfig) -> Result<Vec<LayerDetection>> {
    cfg.check()?;
    trace.require(CaptureField::Hidden)?;
    (0..trace.num_layers())
        .map(|l| {
            let rec = trace.layer_field(l, CaptureField::Hidden)?;
            detect_layer(l, rec.hidden()?, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkClass {
    Primary,
    Secondary,
}

/// One token's sink episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkRun {
    pub position: usize,
    pub l_start: usize,
    /// Number of consecutive sink layers starting at `l_start`.
    pub lifetime: usize,
    /// The run lasts through the final layer.
    pub reaches_end: bool,
    pub peak_norm_ratio: f64,
    pub class: SinkClass,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunExtraction {
    pub runs: Vec<SinkRun>,
    pub bos_l_start: Option<usize>,
    pub warnings: Vec<String>,
}

impl RunExtraction {
    pub fn secondary(&self) -> impl Iterator<Item = &SinkRun> {
        self.runs.iter().filter(|r| r.class == SinkClass::Secondary)
    }
}

struct OpenRun {
    start: usize,
    len: usize,
    peak: f64,
}

/// First qualifying run of each position, in position order, unclassified.
fn first_runs(per_layer: &[LayerDetection], min_run: usize) -> Vec<(usize, OpenRun)> {
    let mut positions: Vec<usize> = per_layer.iter().flat_map(|d| d.positions.iter().copied()).collect();
    positions.sort_unstable();
    positions.dedup();
    let mut out = Vec::new();
    for p in positions {
        let mut current: Option<OpenRun> = None;
        let mut found = None;
        for d in per_layer {
            match (d.ratio_of(p), current.as_mut()) {
                (Some(r), Some(run)) => {
                    run.len += 1;
                    run.peak = run.peak.max(r);
                }
                (Some(r), None) => {
                    current = Some(OpenRun {
                        start: d.layer,
                        len: 1,
                        peak: r,
                    })
                }
                (None, _) => {
                    if let Some(run) = current.take() {
                        if run.len >= min_run {
                            found = Some(run);
                            break;
                        }
                    }
                }
            }
        }
        if found.is_none() {
            found = current.filter(|r| r.len >= min_run);
        }
        if let Some(run) = found {
            out.push((p, run));
        }
    }
    out
}

fn classify(raw: Vec<(usize, OpenRun)>, num_layers: usize, tokens: &[String], cfg: &DetectorConfig) -> RunExtraction {
    let bos_l_start = raw.iter().find(|(p, _)| *p == 0).map(|(_, r)| r.start);
    let mut warnings = Vec::new();
    if bos_l_start.is_none() && !raw.is_empty() {
        warnings.push("BosNotDetected: no sink run at position 0; all runs classed secondary".to_string());
    }
    let runs = raw
        .into_iter()
        .map(|(position, r)| {
            let reaches_end = r.start + r.len == num_layers;
            let primary = bos_l_start.is_some_and(|b| r.start.abs_diff(b) <= cfg.primary_slack) && reaches_end;
            SinkRun {
                position,
                l_start: r.start,
                lifetime: r.len,
                reaches_end,
                peak_norm_ratio: r.peak,
                class: if primary { SinkClass::Primary } else { SinkClass::Secondary },
                token: tokens.get(position).cloned().unwrap_or_default(),
            }
        })
        .collect();
    RunExtraction {
        runs,
        bos_l_start,
        warnings,
    }
}

/// Turns per-layer sink sets into classified [`SinkRun`]s.
///
/// Only the first run of at least `min_run` layers per position is kept;
/// shorter flickers are discarded.
pub fn extract_sink_runs(per_layer: &[LayerDetection], meta: &TraceMeta, cfg: &DetectorConfig) -> RunExtraction {
    classify(first_runs(per_layer, cfg.min_run), meta.num_layers, &meta.tokens, cfg)
}

/// Incremental run extraction fed one layer at a time, for traces read
/// sequentially. Produces the same result as [`extract_sink_runs`].
pub struct RunTracker {
    cfg: DetectorConfig,
    open: BTreeMap<usize, OpenRun>,
    closed: BTreeMap<usize, OpenRun>,
    next_layer: usize,
}

impl RunTracker {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self {
            cfg,
            open: BTreeMap::new(),
            closed: BTreeMap::new(),
            next_layer: 0,
        }
    }

    pub fn push(&mut self, detection: &LayerDetection) -> Result<()> {
        if detection.layer != self.next_layer {
            return Err(Error::Index(format!(
                "run tracker expected layer {}, got {}",
                self.next_layer, detection.layer
            )));
        }
        self.next_layer += 1;
        let ended: Vec<usize> = self
            .open
            .keys()
            .copied()
            .filter(|p| !detection.contains(*p))
            .collect();
        for p in ended {
            let run = self.open.remove(&p).expect("key just listed");
            if run.len >= self.cfg.min_run && !self.closed.contains_key(&p) {
                self.closed.insert(p, run);
            }
        }
        for (&p, &r) in detection.positions.iter().zip(&detection.norm_ratios) {
            if self.closed.contains_key(&p) {
                continue;
            }
            self.open
                .entry(p)
                .and_modify(|run| {
                    run.len += 1;
                    run.peak = run.peak.max(r);
                })
                .or_insert(OpenRun {
                    start: detection.layer,
                    len: 1,
                    peak: r,
                });
        }
        Ok(())
    }

    pub fn finish(mut self, meta: &TraceMeta) -> RunExtraction {
        for (p, run) in std::mem::take(&mut self.open) {
            if run.len >= self.cfg.min_run && !self.closed.contains_key(&p) {
                self.closed.insert(p, run);
            }
        }
        let raw = self.closed.into_iter().collect();
        classify(raw, meta.num_layers, &meta.tokens, &self.cfg)
    }
}

/// Detection followed by run extraction, streaming layer by layer.
pub fn detect_runs<T: TraceAccess + ?Sized>(trace: &T, cfg: &DetectorConfig) -> Result<RunExtraction> {
    cfg.check()?;
    trace.require(CaptureField::Hidden)?;
    let mut tracker = RunTracker::new(cfg.clone());
    for l in 0..trace.num_layers() {
        let rec = trace.layer_field(l, CaptureField::Hidden)?;
        tracker.push(&detect_layer(l, rec.hidden()?, cfg)?)?;
    }
    Ok(tracker.finish(trace.meta()))
}

#[cfg(test)]
mod tests;
