use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sinkscope::detect::DetectorConfig;
use sinkscope::formation::ProbeConfig;
use sinkscope::model::Site;

use crate::GlobalArgs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormationOptions {
    /// Swap layers; `0..=l_start` of the earliest secondary sink when empty.
    pub swap_layers: Vec<usize>,
    pub sites: Vec<Site>,
    /// Seed of the random comparison set.
    pub comparison_seed: u64,
    /// Cohorts smaller than this get a warning in the probe section.
    pub min_probe_cohort: usize,
}

impl Default for FormationOptions {
    fn default() -> Self {
        Self {
            swap_layers: Vec::new(),
            sites: Site::ALL.to_vec(),
            comparison_seed: 0,
            min_probe_cohort: 250,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectOptions {
    pub ratio_layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub detector: DetectorConfig,
    pub probe: ProbeConfig,
    pub formation: FormationOptions,
    pub effect: EffectOptions,
    /// Bin width of the position histogram, as a fraction of the sequence.
    pub position_bin_width: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            probe: ProbeConfig::default(),
            formation: FormationOptions::default(),
            effect: EffectOptions::default(),
            position_bin_width: 0.02,
        }
    }
}

impl PipelineConfig {
    pub fn resolve(global: &GlobalArgs) -> anyhow::Result<Self> {
        let mut cfg = match &global.config {
            Some(path) => load(path)?,
            None => Self::default(),
        };
        if let Some(v) = global.tau_cos {
            cfg.detector.tau_cos = v;
        }
        if let Some(v) = global.norm_gate {
            cfg.detector.norm_ratio_gate = v;
        }
        if let Some(v) = global.min_run {
            cfg.detector.min_run = v;
        }
        if let Some(seed) = global.seed {
            cfg.formation.comparison_seed = seed;
        }
        cfg.detector.check()?;
        Ok(cfg)
    }
}

fn load(path: &Path) -> anyhow::Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
