//! How secondary sinks form: alignment of the MLP stages with the sink
//! direction at the formation layer, PCA probing of that MLP, separability
//! of future sinks from ordinary tokens before they form, and activation
//! swaps that test which early activations the sink depends on.
//!
//! The detector reports `l_start` as the first layer whose *input* is a
//! sink, so the MLP that writes a sink is the one at layer `l_start − 1`.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{detect_sinks_per_layer, DetectorConfig, SinkClass, SinkRun};
use crate::error::{Error, Result};
use crate::linalg::{axpy, cosine_similarity, median, norm, pca, quantile, Matrix, Vector};
use crate::model::{forward_with_capture, mlp_probe, run_forward, Intervention, Site, ToyModelSpec};
use crate::trace::{CaptureField, TraceAccess};

mod separability;

pub use separability::{
    loo_centroid_accuracy, separability, separability_by_layer, silhouette, ComparisonPolicy, SeparabilityCurve,
    SeparabilityPoint,
};

/// Layer whose MLP writes a run's sink.
pub fn formation_layer(run: &SinkRun) -> Option<usize> {
    run.l_start.checked_sub(1)
}

fn secondary_positions(runs: &[SinkRun]) -> Vec<usize> {
    runs.iter()
        .filter(|r| r.class == SinkClass::Secondary)
        .map(|r| r.position)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpStage {
    /// MLP input `h + o`.
    Input,
    PostNorm,
    /// `SiLU(gate) ⊙ up`, compared against `W_downᵀ · reference`.
    Gated,
    Output,
    /// Residual after the layer.
    HiddenNext,
}

impl MlpStage {
    pub const ALL: [MlpStage; 5] = [
        MlpStage::Input,
        MlpStage::PostNorm,
        MlpStage::Gated,
        MlpStage::Output,
        MlpStage::HiddenNext,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MlpStage::Input => "x",
            MlpStage::PostNorm => "post_norm",
            MlpStage::Gated => "gated",
            MlpStage::Output => "f",
            MlpStage::HiddenNext => "h_next",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: MlpStage,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTrace {
    pub mlp_layer: usize,
    /// Position whose hidden state after the layer is the reference.
    pub reference_position: usize,
    pub positions: Vec<usize>,
    /// One row per position, in [`MlpStage::ALL`] order.
    pub per_token: Vec<[f64; 5]>,
    pub summary: Vec<StageSummary>,
}

impl CosineTrace {
    pub fn median(&self, stage: MlpStage) -> f64 {
        self.summary
            .iter()
            .find(|s| s.stage == stage)
            .map(|s| s.median)
            .unwrap_or(f64::NAN)
    }
}

/// Cosine of every MLP stage against the BOS hidden state at `l_start`, for
/// the secondary sinks that start at `l_start`.
pub fn mlp_cosine_trace(
    model: &ToyModelSpec,
    token_ids: &[usize],
    runs: &[SinkRun],
    l_start: usize,
) -> Result<CosineTrace> {
    if l_start == 0 {
        return Err(Error::Config("l_start 0 has no MLP before it".into()));
    }
    let positions: Vec<usize> = runs
        .iter()
        .filter(|r| r.class == SinkClass::Secondary && r.l_start == l_start)
        .map(|r| r.position)
        .collect();
    if positions.is_empty() {
        return Err(Error::EmptyCohort(format!("no secondary sinks start at layer {l_start}")));
    }
    stage_cosines(model, token_ids, &positions, l_start - 1, 0)
}

/// [`mlp_cosine_trace`] for an arbitrary cohort, e.g. a control set.
pub fn stage_cosines(
    model: &ToyModelSpec,
    token_ids: &[usize],
    positions: &[usize],
    mlp_layer: usize,
    reference_position: usize,
) -> Result<CosineTrace> {
    if positions.is_empty() {
        return Err(Error::EmptyCohort("no positions to trace".into()));
    }
    if positions.contains(&reference_position) {
        return Err(Error::Config(format!(
            "reference position {reference_position} is part of the cohort"
        )));
    }
    if mlp_layer >= model.config.num_layers {
        return Err(Error::Index(format!(
            "layer {mlp_layer} of a {}-layer model",
            model.config.num_layers
        )));
    }
    if let Some(&p) = positions.iter().chain([&reference_position]).find(|&&p| p >= token_ids.len()) {
        return Err(Error::Index(format!("position {p} outside {} tokens", token_ids.len())));
    }
    let lw = &model.layers[mlp_layer];
    let mut per_token = Vec::with_capacity(positions.len());
    run_forward(model, token_ids, &[], |acts| {
        if acts.layer != mlp_layer {
            return Ok(());
        }
        let next = |t: usize| -> Vec<f64> {
            acts.mlp_in.row(t).iter().zip(acts.mlp_out.row(t)).map(|(a, f)| a + f).collect()
        };
        let reference = next(reference_position);
        let gated_ref = lw.w_down.matvec_t(&reference);
        for &p in positions {
            let cos = |v: &[f64], r: &[f64]| match cosine_similarity(v, r) {
                Ok(c) => Ok(c),
                Err(Error::DegenerateVector(_)) if norm(r) > 0.0 => Ok(0.0),
                Err(e) => Err(e),
            };
            per_token.push([
                cos(acts.mlp_in.row(p), &reference)?,
                cos(acts.mlp_post_norm.row(p), &reference)?,
                cos(acts.gated.row(p), &gated_ref)?,
                cos(acts.mlp_out.row(p), &reference)?,
                cos(&next(p), &reference)?,
            ]);
        }
        Ok(())
    })?;
    let summary = MlpStage::ALL
        .iter()
        .enumerate()
        .map(|(i, &stage)| {
            let col: Vec<f64> = per_token.iter().map(|row| row[i]).collect();
            StageSummary {
                stage,
                median: median(&col).unwrap_or(f64::NAN),
                q1: quantile(&col, 0.25).unwrap_or(f64::NAN),
                q3: quantile(&col, 0.75).unwrap_or(f64::NAN),
            }
        })
        .collect();
    Ok(CosineTrace {
        mlp_layer,
        reference_position,
        positions: positions.to_vec(),
        per_token,
        summary,
    })
}

/// MLP inputs `h + o` of the given positions at one layer, one row each.
pub fn cohort_mlp_inputs(model: &ToyModelSpec, token_ids: &[usize], positions: &[usize], layer: usize) -> Result<Matrix> {
    if layer >= model.config.num_layers {
        return Err(Error::Index(format!(
            "layer {layer} of a {}-layer model",
            model.config.num_layers
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= token_ids.len()) {
        return Err(Error::Index(format!("position {p} outside {} tokens", token_ids.len())));
    }
    let mut rows = Vec::new();
    run_forward(model, token_ids, &[], |acts| {
        if acts.layer == layer {
            rows = positions.iter().map(|&p| acts.mlp_in.row(p).to_vec()).collect();
        }
        Ok(())
    })?;
    if rows.is_empty() {
        return Err(Error::EmptyCohort("no positions given".into()));
    }
    Matrix::from_rows(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub k: usize,
    /// Probe magnitude; the cohort's median input norm when unset.
    pub alpha: Option<f64>,
    /// Feed probes through the MLP's RMSNorm first. Off by default so that
    /// the magnitude of the probe matters.
    pub apply_pre_norm: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 3,
            alpha: None,
            apply_pre_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub component: usize,
    /// `+1` or `−1`.
    pub sign: i8,
    pub output_norm: f64,
    pub cos_to_sink: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer: usize,
    pub alpha: f64,
    pub explained_variance_ratio: Vec<f64>,
    pub components: Matrix,
    /// Two entries per component, `+` first.
    pub entries: Vec<ProbeEntry>,
}

impl ProbeResult {
    /// Entry with the larger output norm for one component.
    pub fn dominant(&self, component: usize) -> Option<&ProbeEntry> {
        self.pair(component)
            .map(|(p, m)| if p.output_norm >= m.output_norm { p } else { m })
    }

    /// Larger over smaller output norm of the two signs.
    pub fn sign_ratio(&self, component: usize) -> Option<f64> {
        self.pair(component).map(|(p, m)| {
            let (hi, lo) = if p.output_norm >= m.output_norm {
                (p.output_norm, m.output_norm)
            } else {
                (m.output_norm, p.output_norm)
            };
            if lo > 0.0 {
                hi / lo
            } else if hi > 0.0 {
                f64::INFINITY
            } else {
                1.0
            }
        })
    }

    fn pair(&self, component: usize) -> Option<(&ProbeEntry, &ProbeEntry)> {
        let p = self.entries.get(2 * component)?;
        let m = self.entries.get(2 * component + 1)?;
        Some((p, m))
    }
}

/// PCA of the cohort inputs `x` followed by `±α·PC_i` probes of the MLP at
/// `layer`, each compared against `sink_direction`.
pub fn pca_probe(
    model: &ToyModelSpec,
    layer: usize,
    x: &Matrix,
    sink_direction: &[f64],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let alpha = match cfg.alpha {
        Some(a) if a > 0.0 && a.is_finite() => a,
        Some(a) => return Err(Error::Config(format!("probe alpha {a} must be positive"))),
        None => {
            let norms: Vec<f64> = x.row_iter().map(norm).collect();
            match median(&norms) {
                Some(m) if m > 0.0 => m,
                _ => return Err(Error::DegenerateVector("cohort inputs have zero median norm".into())),
            }
        }
    };
    if norm(sink_direction) == 0.0 {
        return Err(Error::DegenerateVector("sink direction is zero".into()));
    }
    let res = pca(x, cfg.k)?;
    let mut entries = Vec::with_capacity(2 * cfg.k);
    for (i, pc) in res.components.row_iter().enumerate() {
        for sign in [1i8, -1] {
            let v: Vec<f64> = pc.iter().map(|c| f64::from(sign) * alpha * c).collect();
            let out = mlp_probe(model, layer, &v, cfg.apply_pre_norm)?.output;
            let output_norm = norm(&out);
            let cos_to_sink = if output_norm > 0.0 {
                cosine_similarity(&out, sink_direction)?
            } else {
                0.0
            };
            entries.push(ProbeEntry {
                component: i,
                sign,
                output_norm,
                cos_to_sink,
            });
        }
    }
    Ok(ProbeResult {
        layer,
        alpha,
        explained_variance_ratio: res.explained_variance_ratio,
        components: res.components,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapOutcome {
    pub position: usize,
    pub swap_layer: usize,
    pub site: Site,
    pub suppressed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRate {
    pub swap_layer: usize,
    pub site: Site,
    pub trials: usize,
    pub suppressed: usize,
    pub suppression_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub outcomes: Vec<SwapOutcome>,
    pub rates: Vec<SwapRate>,
}

impl SwapReport {
    pub fn rate(&self, swap_layer: usize, site: Site) -> Option<f64> {
        self.rates
            .iter()
            .find(|r| r.swap_layer == swap_layer && r.site == site)
            .map(|r| r.suppression_rate)
    }
}

/// Replaces each secondary sink's activation at `(layer, site)` with the
/// mean activation of the non-sink tokens there and reruns the model.
///
/// A sink counts as suppressed when, after the swap, it never stays a sink
/// for `min_run` consecutive layers (fewer if fewer layers remain).
pub fn swap_experiment(
    model: &ToyModelSpec,
    token_ids: &[usize],
    runs: &[SinkRun],
    swap_layers: &[usize],
    sites: &[Site],
    cfg: &DetectorConfig,
) -> Result<SwapReport> {
    cfg.check()?;
    let num_layers = model.config.num_layers;
    let cohort = secondary_positions(runs);
    if cohort.is_empty() {
        return Err(Error::EmptyCohort("baseline has no secondary sinks".into()));
    }
    if let Some(&l) = swap_layers.iter().find(|&&l| l + 1 >= num_layers) {
        return Err(Error::Index(format!(
            "swap layer {l} leaves no later layer to check in a {num_layers}-layer model"
        )));
    }
    let sinks: BTreeSet<usize> = runs.iter().map(|r| r.position).collect();
    let ordinary: Vec<usize> = (0..token_ids.len()).filter(|p| !sinks.contains(p)).collect();
    if ordinary.is_empty() {
        return Err(Error::EmptyCohort("no non-sink tokens to average".into()));
    }

    let wanted: BTreeSet<usize> = swap_layers.iter().copied().collect();
    let mut means: Vec<((usize, Site), Vector)> = Vec::new();
    run_forward(model, token_ids, &[], |acts| {
        if !wanted.contains(&acts.layer) {
            return Ok(());
        }
        for &site in sites {
            let m = match site {
                Site::Hidden => acts.hidden,
                Site::AttnOut => acts.attn_out,
                Site::MlpOut => acts.mlp_out,
            };
            let mut acc = vec![0.0; m.cols()];
            for &p in &ordinary {
                axpy(1.0 / ordinary.len() as f64, m.row(p), &mut acc);
            }
            means.push(((acts.layer, site), Vector::new(acc)?));
        }
        Ok(())
    })?;

    let capture = [CaptureField::Hidden].into_iter().collect();
    let tasks: Vec<(usize, Site, usize)> = swap_layers
        .iter()
        .flat_map(|&l| {
            let cohort = &cohort;
            sites.iter().flat_map(move |&s| cohort.iter().map(move |&p| (l, s, p)))
        })
        .collect();
    let outcomes: Vec<SwapOutcome> = tasks
        .par_iter()
        .map(|&(layer, site, position)| {
            let iv = Intervention {
                layer,
                position,
                site,
                replacement: means
                    .iter()
                    .find(|(k, _)| *k == (layer, site))
                    .expect("mean computed for every requested layer and site")
                    .1
                    .clone(),
            };
            let trace = forward_with_capture(model, token_ids, &capture, &[iv])?;
            let per_layer = detect_sinks_per_layer(&trace, cfg)?;
            let need = cfg.min_run.min(num_layers - 1 - layer);
            let mut streak = 0;
            let mut longest = 0;
            for det in &per_layer[layer + 1..] {
                streak = if det.contains(position) { streak + 1 } else { 0 };
                longest = longest.max(streak);
            }
            Ok(SwapOutcome {
                position,
                swap_layer: layer,
                site,
                suppressed: longest < need,
            })
        })
        .collect::<Result<_>>()?;

    let rates = swap_layers
        .iter()
        .flat_map(|&l| sites.iter().map(move |&s| (l, s)))
        .map(|(swap_layer, site)| {
            let group: Vec<&SwapOutcome> = outcomes
                .iter()
                .filter(|o| o.swap_layer == swap_layer && o.site == site)
                .collect();
            let suppressed = group.iter().filter(|o| o.suppressed).count();
            SwapRate {
                swap_layer,
                site,
                trials: group.len(),
                suppressed,
                suppression_rate: suppressed as f64 / group.len() as f64,
            }
        })
        .collect();
    Ok(SwapReport { outcomes, rates })
}

#[cfg(test)]
mod tests;
