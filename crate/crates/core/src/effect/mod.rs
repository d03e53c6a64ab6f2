//! What secondary sinks do to attention: depth profiles of sink-scores with
//! the BOS valley, the relation between a sink's formation norm and its
//! lifetime and score, and how secondary sinks line up with the valley.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detect::{sink_score_table, SinkClass, SinkRun};
use crate::error::{Error, Result};
use crate::linalg::{norm, ols_fit, spearman_rho, FitResult};
use crate::trace::{CaptureField, TraceAccess};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthProfile {
    pub position: usize,
    /// Head-averaged sink-score per layer.
    pub scores: Vec<f64>,
    /// Layers `window.0 .. window.1` searched for the valley.
    pub window: (usize, usize),
    pub valley_layer: usize,
    /// Highest minus lowest score inside the window.
    pub valley_depth: f64,
}

/// Central layers of an `L`-layer model, leaving out the first and last
/// tenth (rounded down) where scores have not settled.
pub fn middle_window(num_layers: usize) -> (usize, usize) {
    let cut = num_layers / 10;
    (cut, num_layers - cut)
}

/// Valley statistics of a score curve over `middle_window`; ties resolve
/// to the earliest layer.
pub fn valley(scores: &[f64]) -> Result<(usize, f64, (usize, usize))> {
    if scores.is_empty() {
        return Err(Error::Shape("empty profile".into()));
    }
    let window = middle_window(scores.len());
    let mid = &scores[window.0..window.1];
    let (mut arg, mut lo, mut hi) = (window.0, f64::INFINITY, f64::NEG_INFINITY);
    for (i, &s) in mid.iter().enumerate() {
        if s < lo {
            lo = s;
            arg = window.0 + i;
        }
        hi = hi.max(s);
    }
    Ok((arg, hi - lo, window))
}

pub fn depth_profile<T: TraceAccess + ?Sized>(trace: &T, position: usize) -> Result<DepthProfile> {
    let table = sink_score_table(trace, &[position])?;
    let scores = table.profile(position).expect("position is in the table");
    let (valley_layer, valley_depth, window) = valley(&scores)?;
    Ok(DepthProfile {
        position,
        scores,
        window,
        valley_layer,
        valley_depth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSample {
    /// Index of the trace the run came from.
    pub trace: usize,
    pub position: usize,
    pub l_start: usize,
    /// `ln ‖f‖` of the MLP output that forms the sink (layer `l_start − 1`).
    pub log_norm: f64,
    pub lifetime: usize,
    /// `(layer, secondary score / BOS score)`.
    pub score_ratios: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioFit {
    pub layer: usize,
    /// Fit of `ln ratio` against `ln ‖f‖`.
    pub fit: Option<FitResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormCorrelation {
    pub samples: Vec<NormSample>,
    pub lifetime_spearman: Option<f64>,
    /// Why the Spearman correlation is missing, e.g. constant lifetimes.
    pub lifetime_spearman_error: Option<String>,
    pub ratio_fits: Vec<RatioFit>,
    pub warnings: Vec<String>,
}

/// Layers after `l_start` where the run is still a sink.
pub fn default_ratio_layers(run: &SinkRun, num_layers: usize) -> Vec<usize> {
    (run.l_start + 1..(run.l_start + run.lifetime).min(num_layers)).collect()
}

/// Relates the formation norm of every secondary run to its lifetime and to
/// its sink-score relative to BOS. Each run is scored at its default ratio
/// layers plus `extra_layers`.
pub fn norm_correlation<T: TraceAccess + ?Sized>(
    inputs: &[(&T, &[SinkRun])],
    extra_layers: &[usize],
) -> Result<NormCorrelation> {
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (ti, (trace, runs)) in inputs.iter().enumerate() {
        let secondary: Vec<&SinkRun> = runs
            .iter()
            .filter(|r| r.class == SinkClass::Secondary && r.l_start > 0)
            .collect();
        if secondary.is_empty() {
            continue;
        }
        trace.require(CaptureField::MlpOut)?;
        let num_layers = trace.num_layers();
        if let Some(&l) = extra_layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::Index(format!("ratio layer {l} of a {num_layers}-layer trace")));
        }
        let mut positions: Vec<usize> = vec![0];
        positions.extend(secondary.iter().map(|r| r.position));
        let table = sink_score_table(*trace, &positions)?;
        for run in secondary {
            let rec = trace.layer_field(run.l_start - 1, CaptureField::MlpOut)?;
            let f_norm = norm(rec.mlp_out()?.row(run.position));
            if !(f_norm > 0.0) {
                warnings.push(format!(
                    "trace {ti}, position {}: zero MLP output at layer {}, run skipped",
                    run.position,
                    run.l_start - 1
                ));
                continue;
            }
            let layers: BTreeSet<usize> = default_ratio_layers(run, num_layers)
                .into_iter()
                .chain(extra_layers.iter().copied())
                .collect();
            let mut score_ratios = Vec::new();
            for l in layers {
                let bos = table.score(l, 0).expect("BOS is in the table");
                if bos == 0.0 {
                    warnings.push(format!(
                        "trace {ti}, position {}: BOS score is 0 at layer {l}, ratio skipped",
                        run.position
                    ));
                    continue;
                }
                let sec = table.score(l, run.position).expect("run is in the table");
                score_ratios.push((l, sec / bos));
            }
            samples.push(NormSample {
                trace: ti,
                position: run.position,
                l_start: run.l_start,
                log_norm: f_norm.ln(),
                lifetime: run.lifetime,
                score_ratios,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyCohort("no secondary runs to correlate".into()));
    }

    let log_norms: Vec<f64> = samples.iter().map(|s| s.log_norm).collect();
    let lifetimes: Vec<f64> = samples.iter().map(|s| s.lifetime as f64).collect();
    let (lifetime_spearman, lifetime_spearman_error) = if samples.len() < 2 {
        (None, Some("Spearman needs at least two runs".to_string()))
    } else {
        match spearman_rho(&log_norms, &lifetimes) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };

    let mut by_layer: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in &samples {
        for &(l, ratio) in &s.score_ratios {
            if ratio > 0.0 {
                let e = by_layer.entry(l).or_default();
                e.0.push(s.log_norm);
                e.1.push(ratio.ln());
            } else {
                warnings.push(format!(
                    "trace {}, position {}: zero score ratio at layer {l} left out of the fit",
                    s.trace, s.position
                ));
            }
        }
    }
    let ratio_fits = by_layer
        .into_iter()
        .map(|(layer, (x, y))| match ols_fit(&x, &y) {
            Ok(fit) => RatioFit {
                layer,
                fit: Some(fit),
                error: None,
            },
            Err(e) => RatioFit {
                layer,
                fit: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(NormCorrelation {
        samples,
        lifetime_spearman,
        lifetime_spearman_error,
        ratio_fits,
        warnings,
    })
}

/// Co-occurrence of the BOS valley with secondary sink onsets. Descriptive
/// only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compensation {
    /// Contiguous layers around the valley whose BOS score lies in the lower
    /// half of the valley depth, as `(first, last)`.
    pub valley_window: (usize, usize),
    pub secondary_total: usize,
    /// Secondary runs whose `l_start` falls inside `valley_window`.
    pub secondary_in_window: usize,
    pub fraction_in_window: f64,
    /// Fraction expected if onsets were spread evenly over the middle window.
    pub uniform_fraction: f64,
}

pub fn compensation(bos: &DepthProfile, runs: &[SinkRun]) -> Compensation {
    let s = &bos.scores;
    let floor = s[bos.valley_layer] + 0.5 * bos.valley_depth;
    let (mut lo, mut hi) = (bos.valley_layer, bos.valley_layer);
    while lo > bos.window.0 && s[lo - 1] <= floor {
        lo -= 1;
    }
    while hi + 1 < bos.window.1 && s[hi + 1] <= floor {
        hi += 1;
    }
    let onsets: Vec<usize> = runs
        .iter()
        .filter(|r| r.class == SinkClass::Secondary)
        .map(|r| r.l_start)
        .collect();
    let inside = onsets.iter().filter(|&&l| (lo..=hi).contains(&l)).count();
    let span = (bos.window.1 - bos.window.0).max(1);
    Compensation {
        valley_window: (lo, hi),
        secondary_total: onsets.len(),
        secondary_in_window: inside,
        fraction_in_window: if onsets.is_empty() {
            0.0
        } else {
            inside as f64 / onsets.len() as f64
        },
        uniform_fraction: (hi - lo + 1) as f64 / span as f64,
    }
}
