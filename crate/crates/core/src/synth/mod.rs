//! Planted-sink scenarios: toy models whose weights are constructed so that
//! sinks appear at known positions, layers and gains.
//!
//! Construction, all in a random orthonormal set of reserved directions:
//!
//! * `d` is the sink direction, `z` a content direction shared by every
//!   token, `b` the BOS trigger, `v_{p,i}` the triggers of plant `p` and
//!   `w_p` the cue of a staged plant.
//! * Background weights are small and blind to the reserved subspace on
//!   their input side; their outputs are orthogonal to it.
//! * The amplifier of plant `p` at layer `A` has one MLP row per trigger:
//!   gate `β·v_i`, up `v_i`, down `g·d`, so `f = g·SiLU(β⟨u,v_i⟩)⟨u,v_i⟩·d`.
//!   The sink is visible in the hidden states of layers `A+1 ..= A+λ`.
//! * A finite lifetime adds a suppressor at layer `A+λ`: gate `β_s·v_i`,
//!   up `d`, down `−c·d`, with `c` calibrated by a forward pass.
//! * Head 0 of every layer is a sink head whose keys read `−z`: tokens whose
//!   normalized state has lost its content share attract attention.
//! * A staged plant has no trigger in its token's embedding. A cue token at
//!   `p−1` carries `w_p`, and a previous-token head at `copy_layer` writes
//!   `v_p` into position `p`.
//! * A plant with `trigger_from` reuses an earlier plant's triggers and
//!   therefore its amplifier and suppressor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detect::SinkClass;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::model::rope::rope_frequencies;
use crate::model::{forward_with_capture, run_forward, ModelConfig, ToyModelSpec};
use crate::trace::{ActivationTrace, CaptureSet};

mod presets;

pub use presets::{
    detection_scenario, gain_grid, gain_lifetime_grid, null_scenario, pca_scenario, staged_scenario, valley_scenario,
    g_min, G_MIN_TABLE,
};

/// Plain-text fillers; index 0 is the whitespace token used as receiver by
/// staged plants.
const FILLER_NAMES: [&str; 24] = [
    " ", ",", ".", "\n", "the", "and", "of", "to", "a", "in", "is", "1", "0", "-", ":", "(", ")", "it", "we", "=",
    "x", "+", "2", "so",
];

fn default_name() -> String {
    "synthetic".into()
}
fn default_layers() -> usize {
    16
}
fn default_hidden() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_seq() -> usize {
    128
}
fn default_rope_base() -> f64 {
    1e4
}
fn default_eps() -> f64 {
    1e-6
}
fn default_fillers() -> usize {
    FILLER_NAMES.len()
}
fn default_background() -> f64 {
    0.05
}
fn default_content() -> f64 {
    0.5
}
fn default_sink_depth() -> f64 {
    8.0
}
fn default_bos() -> Option<BosPlant> {
    Some(BosPlant::default())
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_receiver() -> String {
    " ".into()
}

/// Scenario description, the JSON accepted by `sinkscope generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_seq")]
    pub seq_len: usize,
    /// Defaults to `2 · hidden_size`.
    #[serde(default)]
    pub mlp_inner: Option<usize>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f64,
    /// Number of background token types.
    #[serde(default = "default_fillers")]
    pub filler_tokens: usize,
    /// Scale ε of background value, output and MLP weights.
    #[serde(default = "default_background")]
    pub background_scale: f64,
    /// Coefficient of the shared content direction, in units of `√h`.
    #[serde(default = "default_content")]
    pub content_scale: f64,
    /// Attention logit gap between an ordinary key and a saturated sink key
    /// in the sink head.
    #[serde(default = "default_sink_depth")]
    pub sink_head_depth: f64,
    /// `null` disables the BOS plant.
    #[serde(default = "default_bos")]
    pub bos: Option<BosPlant>,
    #[serde(default)]
    pub plants: Vec<PlantSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BosPlant {
    /// Amplifier layer; the BOS sink is visible from `layer + 1`.
    #[serde(default)]
    pub layer: usize,
    #[serde(default = "BosPlant::default_gain")]
    pub gain: f64,
    #[serde(default = "one")]
    pub gate_sharpness: f64,
    #[serde(default = "one")]
    pub trigger_magnitude: f64,
    #[serde(default)]
    pub dip: Option<BosDip>,
}

impl BosPlant {
    fn default_gain() -> f64 {
        20.0
    }
}

impl Default for BosPlant {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Partial removal of the BOS sink component at `layer`, restored at
/// `layer + width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BosDip {
    pub layer: usize,
    pub fraction: f64,
    pub width: usize,
}

/// One planted secondary sink family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    /// Amplifier layer. The detector sees the sink from `l_start + 1`.
    pub l_start: usize,
    /// Layers the sink stays visible; `null` means to the last layer.
    #[serde(default)]
    pub lifetime: Option<usize>,
    pub gain: f64,
    #[serde(default = "one")]
    pub gate_sharpness: f64,
    /// Trigger component in token embeddings, in units of `√h`.
    #[serde(default = "one")]
    pub trigger_magnitude: f64,
    #[serde(default = "one_usize")]
    pub num_triggers: usize,
    /// Every trigger token carries all triggers, with magnitudes taken from
    /// a two-level factorial design (spreads decreasing with the index).
    #[serde(default)]
    pub mixed_triggers: bool,
    /// Distinct magnitudes per trigger (single mode).
    #[serde(default = "one_usize")]
    pub token_types: usize,
    /// Relative magnitude spread across token types.
    #[serde(default)]
    pub magnitude_spread: f64,
    /// `(position, trigger_index)`. In mixed mode the index selects the
    /// factorial token type.
    pub trigger_positions: Vec<(usize, usize)>,
    /// Display string of the trigger tokens.
    #[serde(default)]
    pub token: Option<String>,
    /// Deliver the trigger through a previous-token head at this layer.
    #[serde(default)]
    pub copy_layer: Option<usize>,
    /// Filler token that receives a copied trigger.
    #[serde(default = "default_receiver")]
    pub receiver: String,
    /// Index of an earlier plant whose triggers, amplifier and suppressor
    /// this plant shares. Layers, lifetime, gain and trigger count must
    /// match that plant. The shared suppressor is fitted jointly, so it
    /// only clears every position when they carry the trigger with a
    /// similar share of their state.
    #[serde(default)]
    pub trigger_from: Option<usize>,
}

impl PlantSpec {
    pub fn new(l_start: usize, lifetime: Option<usize>, gain: f64, positions: &[usize]) -> Self {
        Self {
            l_start,
            lifetime,
            gain,
            gate_sharpness: 1.0,
            trigger_magnitude: 1.0,
            num_triggers: 1,
            mixed_triggers: false,
            token_types: 1,
            magnitude_spread: 0.0,
            trigger_positions: positions.iter().map(|&p| (p, 0)).collect(),
            token: None,
            copy_layer: None,
            receiver: default_receiver(),
            trigger_from: None,
        }
    }

    fn staged(&self) -> bool {
        self.copy_layer.is_some()
    }

    fn own_triggers(&self) -> usize {
        if self.trigger_from.is_some() {
            0
        } else {
            self.num_triggers
        }
    }
}

/// Labels of one planted sink position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSink {
    pub position: usize,
    /// Index into `plants`; `None` for BOS.
    pub plant: Option<usize>,
    pub token: String,
    /// First layer at which the sink is visible in the hidden states.
    pub l_start: usize,
    pub lifetime: usize,
    pub reaches_end: bool,
    pub gain: f64,
    pub class: SinkClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantTruth {
    pub amplifier_layer: usize,
    pub suppressor_layer: Option<usize>,
    pub suppressor_coefficient: Option<f64>,
    pub copy_layer: Option<usize>,
    /// Plant that owns the trigger directions; this plant's own index
    /// unless they are shared.
    pub trigger_source: usize,
    pub gain: f64,
    pub triggers: Vec<Vec<f64>>,
    pub cue: Option<Vec<f64>>,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedGroundTruth {
    pub sink_direction: Vec<f64>,
    pub content_direction: Vec<f64>,
    /// Hidden-state layer where the BOS sink first appears.
    pub bos_l_start: Option<usize>,
    pub bos_amplifier_layer: Option<usize>,
    pub bos_dip_layer: Option<usize>,
    pub plants: Vec<PlantTruth>,
    /// Planted positions including BOS, sorted by position.
    pub sinks: Vec<PlantedSink>,
}

impl PlantedGroundTruth {
    pub fn secondary(&self) -> impl Iterator<Item = &PlantedSink> {
        self.sinks.iter().filter(|s| s.class == SinkClass::Secondary)
    }

    pub fn sink_at(&self, position: usize) -> Option<&PlantedSink> {
        self.sinks.iter().find(|s| s.position == position)
    }
}

/// A generated model, its token stream and the labels.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: ToyModelSpec,
    pub tokens: Vec<usize>,
    pub truth: PlantedGroundTruth,
}

impl Scenario {
    pub fn trace(&self, capture: &CaptureSet) -> Result<ActivationTrace> {
        forward_with_capture(&self.model, &self.tokens, capture, &[])
    }
}

/// Which MLP rows of which layer belong to a calibrated write.
#[derive(Debug, Clone)]
struct CalibratedWrite {
    layer: usize,
    rows: Vec<usize>,
    positions: Vec<usize>,
    target: CalTarget,
    /// Plant index, or `None` for the BOS dip and restore.
    plant: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum CalTarget {
    /// Remove this fraction of the incoming sink component.
    Remove(f64),
    /// Bring the sink component back to its value at the input of this layer
    /// in the baseline.
    RestoreFrom(usize),
}

struct Reserved {
    sink: Vec<f64>,
    content: Vec<f64>,
    bos: Vec<f64>,
    triggers: Vec<Vec<Vec<f64>>>,
    cues: Vec<Option<Vec<f64>>>,
    all: Vec<Vec<f64>>,
}

impl Reserved {
    fn project_out(&self, x: &mut [f64]) {
        for r in &self.all {
            let c = dot(x, r);
            for (xi, ri) in x.iter_mut().zip(r) {
                *xi -= c * ri;
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn orthonormal_set(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        // Two Gram-Schmidt passes keep orthogonality at machine precision.
        for _ in 0..2 {
            for r in &out {
                let c = dot(&v, r);
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi -= c * ri;
                }
            }
        }
        let n = norm(&v);
        if n < 1e-6 {
            return Err(Error::Config("could not draw independent reserved directions".into()));
        }
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    Ok(out)
}

/// Previous-token head layout: RoPE pairs used and their weights, and the
/// absolute logit margin of the target key over every competitor.
///
/// `self_factor` bounds how much larger the query token's own key can be
/// than an ordinary key; an averaged (swapped-in) token keeps the whole
/// content component while its token-specific part shrinks.
fn previous_token_pattern(head_dim: usize, base: f64, seq_len: usize, self_factor: f64) -> Result<(Vec<f64>, f64)> {
    let freqs = rope_frequencies(head_dim, base)?;
    let mut best: Option<(Vec<f64>, f64, f64)> = None;
    for pairs in 2..=freqs.len().min(4) {
        let candidates: [Vec<f64>; 3] = [
            vec![1.0; pairs],
            (0..pairs).map(|i| 1.0 / (i + 1) as f64).collect(),
            (0..pairs).map(|i| 0.5f64.powi(i as i32)).collect(),
        ];
        for w in candidates {
            let score = |delta: f64| -> f64 { w.iter().zip(&freqs).map(|(wi, f)| wi * (delta * f).cos()).sum() };
            let s0 = score(0.0);
            let worst = (1..seq_len.saturating_sub(1))
                .map(|d| score(-(d as f64)))
                .fold(self_factor * score(1.0), f64::max);
            let margin = s0 - worst;
            let rel = margin / s0;
            if best.as_ref().is_none_or(|b| rel > b.2) {
                best = Some((w, margin, rel));
            }
        }
    }
    match best {
        Some((w, margin, rel)) if rel >= 0.01 => Ok((w, margin)),
        _ => Err(Error::Config(format!(
            "a previous-token head with head_dim {head_dim} and rope_base {base} cannot resolve \
             {seq_len} positions at content_scale giving self factor {self_factor:.3}"
        ))),
    }
}

impl ScenarioConfig {
    fn mlp_inner(&self) -> usize {
        self.mlp_inner.unwrap_or(2 * self.hidden_size)
    }

    pub fn check(&self) -> Result<()> {
        let (l, h, t) = (self.num_layers, self.hidden_size, self.seq_len);
        if l < 3 || h == 0 || t < 2 || self.num_heads == 0 {
            return Err(Error::Config("scenario needs L >= 3, T >= 2 and positive widths".into()));
        }
        if h % self.num_heads != 0 || (h / self.num_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "hidden_size {h} must split into {} heads of even width",
                self.num_heads
            )));
        }
        if self.filler_tokens == 0 {
            return Err(Error::Config("filler_tokens must be positive".into()));
        }
        for (name, v) in [
            ("background_scale", self.background_scale),
            ("content_scale", self.content_scale),
            ("sink_head_depth", self.sink_head_depth),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.content_scale <= 0.0 {
            return Err(Error::Config("content_scale must be positive".into()));
        }
        if let Some(b) = &self.bos {
            if b.layer > l - 2 {
                return Err(Error::Config(format!("BOS layer {} must be at most L-2 = {}", b.layer, l - 2)));
            }
            positive("BOS gain", b.gain)?;
            positive("BOS gate_sharpness", b.gate_sharpness)?;
            positive("BOS trigger_magnitude", b.trigger_magnitude)?;
            if let Some(dip) = &b.dip {
                if dip.layer <= b.layer || dip.width == 0 || dip.layer + dip.width > l - 1 {
                    return Err(Error::Config("BOS dip must sit after the BOS plant and end before L-1".into()));
                }
                if !(dip.fraction > 0.0 && dip.fraction < 1.0) {
                    return Err(Error::Config("BOS dip fraction must lie in (0, 1)".into()));
                }
            }
        }
        let mut taken = vec![false; t];
        let mut mark = |p: usize, what: &str| -> Result<()> {
            if p == 0 || p >= t {
                return Err(Error::Config(format!("{what} position {p} outside 1..{t}")));
            }
            if std::mem::replace(&mut taken[p], true) {
                return Err(Error::Config(format!("position {p} is used twice")));
            }
            Ok(())
        };
        for (i, p) in self.plants.iter().enumerate() {
            let ctx = |m: &str| Error::Config(format!("plant {i}: {m}"));
            if p.l_start < 1 || p.l_start > l - 2 {
                return Err(ctx(&format!("l_start {} outside [1, L-2]", p.l_start)));
            }
            if let Some(lt) = p.lifetime {
                if lt < 1 || p.l_start + lt > l - 1 {
                    return Err(ctx(&format!("lifetime {lt} needs a suppressor layer below L")));
                }
            }
            positive("gain", p.gain).map_err(|_| ctx("gain must be positive"))?;
            positive("gate_sharpness", p.gate_sharpness).map_err(|_| ctx("gate_sharpness must be positive"))?;
            positive("trigger_magnitude", p.trigger_magnitude)
                .map_err(|_| ctx("trigger_magnitude must be positive"))?;
            if p.num_triggers == 0 || p.token_types == 0 {
                return Err(ctx("num_triggers and token_types must be positive"));
            }
            if !(0.0..1.0).contains(&p.magnitude_spread) {
                return Err(ctx("magnitude_spread must lie in [0, 1)"));
            }
            if p.trigger_positions.is_empty() {
                return Err(ctx("no trigger positions"));
            }
            if !p.mixed_triggers {
                if let Some((_, k)) = p.trigger_positions.iter().find(|(_, k)| *k >= p.num_triggers) {
                    return Err(ctx(&format!("trigger index {k} out of {}", p.num_triggers)));
                }
            }
            if let Some(j) = p.trigger_from {
                let src = self
                    .plants
                    .get(j)
                    .filter(|_| j < i)
                    .ok_or_else(|| ctx(&format!("trigger_from {j} must name an earlier plant")))?;
                if src.trigger_from.is_some() {
                    return Err(ctx("trigger_from must name a plant that owns its triggers"));
                }
                if (src.l_start, src.lifetime, src.num_triggers, src.mixed_triggers)
                    != (p.l_start, p.lifetime, p.num_triggers, p.mixed_triggers)
                    || src.gain != p.gain
                    || src.gate_sharpness != p.gate_sharpness
                {
                    return Err(ctx("a plant sharing triggers must match its source's layers, gain and triggers"));
                }
            }
            if let Some(c) = p.copy_layer {
                if c >= p.l_start {
                    return Err(ctx("copy_layer must precede l_start"));
                }
                if self.num_heads < 2 {
                    return Err(ctx("a staged plant needs at least two heads"));
                }
                if p.num_triggers != 1 || p.mixed_triggers {
                    return Err(ctx("a staged plant has exactly one trigger"));
                }
                if !FILLER_NAMES[..self.filler_tokens.min(FILLER_NAMES.len())].contains(&p.receiver.as_str()) {
                    return Err(ctx(&format!("receiver {:?} is not a filler token", p.receiver)));
                }
            }
            for &(pos, _) in &p.trigger_positions {
                mark(pos, "trigger")?;
                if p.staged() {
                    if pos < 2 {
                        return Err(ctx("a staged position needs a cue before it"));
                    }
                    mark(pos - 1, "cue")?;
                }
            }
        }
        let reserved = 3 + self.plants.iter().map(|p| p.own_triggers() + usize::from(p.staged())).sum::<usize>();
        if 2 * reserved > h {
            return Err(Error::Config(format!(
                "{reserved} reserved directions need hidden_size >= {}",
                2 * reserved
            )));
        }
        Ok(())
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Relative trigger magnitudes of each token type of a plant; one row per
/// type, one column per trigger.
fn token_type_magnitudes(p: &PlantSpec) -> Vec<Vec<f64>> {
    let k = p.num_triggers;
    if p.mixed_triggers {
        (0..1usize << k)
            .map(|ty| {
                (0..k)
                    .map(|i| {
                        let s = p.magnitude_spread * (k - i) as f64 / k as f64;
                        if ty >> i & 1 == 1 {
                            1.0 + s
                        } else {
                            1.0 - s
                        }
                    })
                    .collect()
            })
            .collect()
    } else {
        let n = p.token_types;
        (0..k * n)
            .map(|ty| {
                let (trigger, j) = (ty / n, ty % n);
                let m = if n == 1 {
                    1.0
                } else {
                    1.0 + p.magnitude_spread * (2.0 * j as f64 / (n - 1) as f64 - 1.0)
                };
                (0..k).map(|i| if i == trigger { m } else { 0.0 }).collect()
            })
            .collect()
    }
}

/// Token type for the `occurrence`-th listed position of a plant.
fn token_type_of(p: &PlantSpec, occurrence: usize, trigger: usize) -> usize {
    if p.mixed_triggers {
        trigger % (1 << p.num_triggers)
    } else {
        trigger * p.token_types + occurrence % p.token_types
    }
}

/// Builds the model, token stream and ground truth for `cfg`.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.check()?;
    let (nl, h, nh, t_len) = (cfg.num_layers, cfg.hidden_size, cfg.num_heads, cfg.seq_len);
    let hd = h / nh;
    let m = cfg.mlp_inner();
    let sqrt_h = (h as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Reserved directions.
    let n_reserved = 3 + cfg.plants.iter().map(|p| p.own_triggers() + usize::from(p.staged())).sum::<usize>();
    let mut dirs = orthonormal_set(&mut rng, n_reserved, h)?.into_iter();
    let mut next = || dirs.next().expect("counted above");
    let sink = next();
    let content = next();
    let bos_dir = next();
    let mut triggers: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut cues = Vec::new();
    let mut owned = Vec::new();
    for p in &cfg.plants {
        let own: Vec<Vec<f64>> = (0..p.own_triggers()).map(|_| next()).collect();
        owned.extend(own.iter().cloned());
        triggers.push(match p.trigger_from {
            Some(j) => triggers[j].clone(),
            None => own,
        });
        cues.push(p.staged().then(&mut next));
    }
    let reserved = Reserved {
        all: [sink.clone(), content.clone(), bos_dir.clone()]
            .into_iter()
            .chain(owned)
            .chain(cues.iter().flatten().cloned())
            .collect(),
        sink,
        content,
        bos: bos_dir,
        triggers,
        cues,
    };

    // Vocabulary.
    let n_fill = cfg.filler_tokens;
    let mut vocab: Vec<String> = vec!["<bos>".into()];
    // A filler whose name is claimed by a plant's trigger token is renamed.
    let claimed: Vec<&str> = cfg.plants.iter().filter_map(|p| p.token.as_deref()).collect();
    vocab.extend((0..n_fill).map(|i| match FILLER_NAMES.get(i) {
        Some(s) if !claimed.contains(s) => s.to_string(),
        _ => format!("w{i}"),
    }));
    let mut type_ids: Vec<Vec<usize>> = Vec::new();
    let mut cue_ids: Vec<Option<usize>> = Vec::new();
    for (pi, p) in cfg.plants.iter().enumerate() {
        if p.staged() {
            type_ids.push(Vec::new());
            cue_ids.push(Some(vocab.len()));
            vocab.push(format!("<cue{pi}>"));
            continue;
        }
        let n_types = token_type_magnitudes(p).len();
        let base = p.token.clone().unwrap_or_else(|| format!("<p{pi}>"));
        let ids = (0..n_types)
            .map(|ty| {
                vocab.push(if n_types == 1 { base.clone() } else { format!("{base}{ty}") });
                vocab.len() - 1
            })
            .collect();
        type_ids.push(ids);
        cue_ids.push(None);
    }
    {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = vocab.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Config(format!("token string {dup:?} is defined twice")));
        }
    }

    // Token stream.
    let mut tokens: Vec<usize> = Vec::with_capacity(t_len);
    tokens.push(0);
    for _ in 1..t_len {
        tokens.push(1 + rng.random_range(0..n_fill));
    }
    for (pi, p) in cfg.plants.iter().enumerate() {
        let mut occurrences: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
        for &(pos, k) in &p.trigger_positions {
            if let Some(cue) = cue_ids[pi] {
                tokens[pos - 1] = cue;
                tokens[pos] = 1 + FILLER_NAMES.iter().position(|s| *s == p.receiver).expect("checked");
            } else {
                let occ = occurrences.entry(k).or_default();
                tokens[pos] = type_ids[pi][token_type_of(p, *occ, k)];
                *occ += 1;
            }
        }
    }

    // Embeddings. Fillers share one norm so the content share of their
    // normalized states is identical.
    let cz = cfg.content_scale * sqrt_h;
    let mut embedding = Matrix::zeros(vocab.len(), h);
    let background_embedding = |rng: &mut ChaCha8Rng, len: f64| -> Vec<f64> {
        let mut e = gaussian(rng, h, 1.0);
        reserved.project_out(&mut e);
        let n = norm(&e);
        e.iter_mut().for_each(|x| *x *= len / n);
        e
    };
    for id in 1..=n_fill {
        let mut e = background_embedding(&mut rng, sqrt_h);
        crate::linalg::axpy(cz, &reserved.content, &mut e);
        embedding.row_mut(id).copy_from_slice(&e);
    }
    {
        let row = embedding.row_mut(0);
        crate::linalg::axpy(cz, &reserved.content, row);
        let alpha = cfg.bos.as_ref().map_or(1.0, |b| b.trigger_magnitude);
        crate::linalg::axpy(alpha * sqrt_h, &reserved.bos, row);
    }
    const CUE_SHARE: f64 = 0.6;
    for (pi, p) in cfg.plants.iter().enumerate() {
        if let Some(cue) = cue_ids[pi] {
            let mut e = background_embedding(&mut rng, sqrt_h * (1.0 - CUE_SHARE * CUE_SHARE).sqrt());
            crate::linalg::axpy(cz, &reserved.content, &mut e);
            crate::linalg::axpy(CUE_SHARE * sqrt_h, reserved.cues[pi].as_ref().expect("staged"), &mut e);
            embedding.row_mut(cue).copy_from_slice(&e);
            continue;
        }
        for (ty, mags) in token_type_magnitudes(p).iter().enumerate() {
            let row = embedding.row_mut(type_ids[pi][ty]);
            crate::linalg::axpy(cz, &reserved.content, row);
            for (i, mag) in mags.iter().enumerate() {
                crate::linalg::axpy(mag * p.trigger_magnitude * sqrt_h, &reserved.triggers[pi][i], row);
            }
        }
    }

    // Background layers.
    let eps_bg = cfg.background_scale;
    let mut layers = Vec::with_capacity(nl);
    for _ in 0..nl {
        let mut lw = crate::model::LayerWeights::zeros(h, m);
        for r in hd..h {
            for (mat, scale) in [(&mut lw.w_q, 1.0), (&mut lw.w_k, 1.0), (&mut lw.w_v, eps_bg)] {
                let mut row = gaussian(&mut rng, h, scale / sqrt_h);
                reserved.project_out(&mut row);
                mat.row_mut(r).copy_from_slice(&row);
            }
        }
        for c in hd..h {
            let mut col = gaussian(&mut rng, h, eps_bg / sqrt_h);
            reserved.project_out(&mut col);
            set_col(&mut lw.w_o, c, &col);
        }
        for r in 0..m {
            for mat in [&mut lw.w_gate, &mut lw.w_up] {
                let mut row = gaussian(&mut rng, h, eps_bg / sqrt_h);
                reserved.project_out(&mut row);
                mat.row_mut(r).copy_from_slice(&row);
            }
            let mut col = gaussian(&mut rng, h, eps_bg / (m as f64).sqrt());
            reserved.project_out(&mut col);
            set_col(&mut lw.w_down, r, &col);
        }
        layers.push(lw);
    }

    // Sink head in every layer: keys read −z, queries read z, both in the
    // lowest-frequency RoPE pair so the pattern barely depends on distance.
    let zeta = cfg.content_scale / (1.0 + cfg.content_scale * cfg.content_scale).sqrt();
    let qk = (cfg.sink_head_depth * (hd as f64).sqrt() / (h as f64 * zeta * zeta)).sqrt();
    for lw in &mut layers {
        let r = hd - 2;
        lw.w_q.row_mut(r).iter_mut().zip(&reserved.content).for_each(|(w, z)| *w = qk * z);
        lw.w_k.row_mut(r).iter_mut().zip(&reserved.content).for_each(|(w, z)| *w = -qk * z);
    }

    // Planted MLP rows, allocated from the top of each layer.
    let mut free_row = vec![m; nl];
    let mut take_row = |layer: usize| -> Result<usize> {
        if free_row[layer] == 0 {
            return Err(Error::Config(format!("layer {layer} has no MLP rows left for planted writes")));
        }
        free_row[layer] -= 1;
        Ok(free_row[layer])
    };
    let mut calibrated: Vec<CalibratedWrite> = Vec::new();
    let mut truth_plants = Vec::new();
    let mut sinks = Vec::new();

    let bos_l_start = cfg.bos.as_ref().map(|b| b.layer + 1);
    if let Some(b) = &cfg.bos {
        let r = take_row(b.layer)?;
        plant_row(&mut layers[b.layer], r, b.gate_sharpness, &reserved.bos, &reserved.bos, b.gain, &reserved.sink);
        if let Some(dip) = &b.dip {
            let r = take_row(dip.layer)?;
            plant_row(&mut layers[dip.layer], r, 1.0, &reserved.bos, &reserved.sink, 0.0, &reserved.sink);
            calibrated.push(CalibratedWrite {
                layer: dip.layer,
                rows: vec![r],
                positions: vec![0],
                target: CalTarget::Remove(dip.fraction),
                plant: None,
            });
            let back = dip.layer + dip.width;
            let r = take_row(back)?;
            plant_row(&mut layers[back], r, 1.0, &reserved.bos, &reserved.sink, 0.0, &reserved.sink);
            calibrated.push(CalibratedWrite {
                layer: back,
                rows: vec![r],
                positions: vec![0],
                target: CalTarget::RestoreFrom(dip.layer),
                plant: None,
            });
        }
        sinks.push(PlantedSink {
            position: 0,
            plant: None,
            token: vocab[0].clone(),
            l_start: b.layer + 1,
            lifetime: nl - b.layer - 1,
            reaches_end: true,
            gain: b.gain,
            class: SinkClass::Primary,
        });
    }

    let mut copy_slots: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for (pi, p) in cfg.plants.iter().enumerate() {
        let a = p.l_start;
        let positions: Vec<usize> = p.trigger_positions.iter().map(|&(pos, _)| pos).collect();
        let suppressor_layer = p.lifetime.map(|lt| a + lt);
        if let Some(j) = p.trigger_from {
            if let Some(w) = calibrated.iter_mut().find(|w| w.plant == Some(j)) {
                w.positions.extend(&positions);
            }
        } else {
            for v in &reserved.triggers[pi] {
                let r = take_row(a)?;
                plant_row(&mut layers[a], r, p.gate_sharpness, v, v, p.gain, &reserved.sink);
            }
        }
        if let (Some(s), None) = (suppressor_layer, p.trigger_from) {
            let rows = reserved.triggers[pi]
                .iter()
                .map(|v| {
                    let r = take_row(s)?;
                    plant_row(&mut layers[s], r, 1.0, v, &reserved.sink, 0.0, &reserved.sink);
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            calibrated.push(CalibratedWrite {
                layer: s,
                rows,
                positions: positions.clone(),
                target: CalTarget::Remove(1.0),
                plant: Some(pi),
            });
        }
        if let Some(c) = p.copy_layer {
            let slot = copy_slots.entry(c).or_insert(0);
            if *slot == 0 {
                plant_previous_token_head(&mut layers[c], hd, cfg, zeta, &reserved.content)?;
            }
            if *slot >= hd {
                return Err(Error::Config(format!("too many staged plants copying at layer {c}")));
            }
            let value_row = hd + *slot;
            let cue = reserved.cues[pi].as_ref().expect("staged");
            layers[c].w_v.row_mut(value_row).copy_from_slice(cue);
            let copied = CUE_SHARE / (1.0 + cfg.content_scale * cfg.content_scale).sqrt();
            let kappa = p.trigger_magnitude / copied;
            let col: Vec<f64> = reserved.triggers[pi][0].iter().map(|x| kappa * x).collect();
            set_col(&mut layers[c].w_o, value_row, &col);
            *slot += 1;
        }
        let detected_start = a + 1;
        let (lifetime, reaches_end) = match p.lifetime {
            Some(lt) => (lt, a + lt == nl),
            None => (nl - detected_start, true),
        };
        let primary = reaches_end && bos_l_start.is_some_and(|b| detected_start.abs_diff(b) <= 1);
        for &pos in &positions {
            sinks.push(PlantedSink {
                position: pos,
                plant: Some(pi),
                token: vocab[tokens[pos]].clone(),
                l_start: detected_start,
                lifetime,
                reaches_end,
                gain: p.gain,
                class: if primary { SinkClass::Primary } else { SinkClass::Secondary },
            });
        }
        truth_plants.push(PlantTruth {
            amplifier_layer: a,
            suppressor_layer,
            suppressor_coefficient: None,
            copy_layer: p.copy_layer,
            trigger_source: p.trigger_from.unwrap_or(pi),
            gain: p.gain,
            triggers: reserved.triggers[pi].clone(),
            cue: reserved.cues[pi].clone(),
            positions,
        });
    }
    sinks.sort_by_key(|s| s.position);

    let config = ModelConfig {
        name: cfg.name.clone(),
        num_layers: nl,
        hidden_size: h,
        num_heads: nh,
        head_dim: hd,
        mlp_inner: m,
        vocab_size: vocab.len(),
        rope_base: cfg.rope_base,
        rmsnorm_eps: cfg.rmsnorm_eps,
        vocab,
    };
    let mut model = ToyModelSpec {
        config,
        embedding,
        layers,
    };
    model.check()?;

    let coefficients = calibrate(&mut model, &tokens, &reserved.sink, &calibrated)?;
    for (w, c) in calibrated.iter().zip(coefficients) {
        if let Some(src) = w.plant {
            for t in truth_plants.iter_mut().filter(|t| t.trigger_source == src) {
                t.suppressor_coefficient = Some(c);
            }
        }
    }

    Ok(Scenario {
        config: cfg.clone(),
        model,
        tokens,
        truth: PlantedGroundTruth {
            sink_direction: reserved.sink,
            content_direction: reserved.content,
            bos_l_start,
            bos_amplifier_layer: cfg.bos.as_ref().map(|b| b.layer),
            bos_dip_layer: cfg.bos.as_ref().and_then(|b| b.dip.as_ref().map(|d| d.layer)),
            plants: truth_plants,
            sinks,
        },
    })
}

fn set_col(mat: &mut Matrix, c: usize, col: &[f64]) {
    for (r, v) in col.iter().enumerate() {
        mat.row_mut(r)[c] = *v;
    }
}

/// Overwrites MLP row `r`: gate `β·gate_dir`, up `up_dir`, down column
/// `gain·out_dir`.
fn plant_row(
    lw: &mut crate::model::LayerWeights,
    r: usize,
    beta: f64,
    gate_dir: &[f64],
    up_dir: &[f64],
    gain: f64,
    out_dir: &[f64],
) {
    lw.w_gate.row_mut(r).iter_mut().zip(gate_dir).for_each(|(w, g)| *w = beta * g);
    lw.w_up.row_mut(r).copy_from_slice(up_dir);
    let col: Vec<f64> = out_dir.iter().map(|x| gain * x).collect();
    set_col(&mut lw.w_down, r, &col);
}

/// Head 1 attends from `t` to `t−1`: the key is the query rotated by one
/// position in each of the highest-frequency RoPE pairs.
fn plant_previous_token_head(
    lw: &mut crate::model::LayerWeights,
    hd: usize,
    cfg: &ScenarioConfig,
    zeta: f64,
    content: &[f64],
) -> Result<()> {
    let c = cfg.content_scale;
    let self_factor = (1.0 + c * c).sqrt() / c;
    let (weights, margin) = previous_token_pattern(hd, cfg.rope_base, cfg.seq_len, self_factor)?;
    let freqs = rope_frequencies(hd, cfg.rope_base)?;
    const TARGET_GAP: f64 = 30.0;
    let sigma2 = TARGET_GAP * (hd as f64).sqrt() / (cfg.hidden_size as f64 * zeta * zeta * margin);
    for r in hd..2 * hd {
        lw.w_q.row_mut(r).fill(0.0);
        lw.w_k.row_mut(r).fill(0.0);
        lw.w_v.row_mut(r).fill(0.0);
        for x in 0..cfg.hidden_size {
            lw.w_o.row_mut(x)[r] = 0.0;
        }
    }
    for (i, w) in weights.iter().enumerate() {
        let s = (sigma2 * w).sqrt();
        let (sin, cos) = freqs[i].sin_cos();
        let base = hd + 2 * i;
        lw.w_q.row_mut(base).iter_mut().zip(content).for_each(|(q, z)| *q = s * z);
        lw.w_k.row_mut(base).iter_mut().zip(content).for_each(|(k, z)| *k = s * cos * z);
        lw.w_k.row_mut(base + 1).iter_mut().zip(content).for_each(|(k, z)| *k = s * sin * z);
    }
    Ok(())
}

/// Sets the down-projection scale of every calibrated write and returns the
/// coefficients (the down column is `coefficient · d`).
///
/// Removals act on disjoint positions and are measured together in one
/// forward pass; restores need the removals in place and get a second pass.
fn calibrate(
    model: &mut ToyModelSpec,
    tokens: &[usize],
    sink: &[f64],
    writes: &[CalibratedWrite],
) -> Result<Vec<f64>> {
    let mut coefficients = vec![0.0; writes.len()];
    // Sink component of BOS at the MLP input of each layer before any
    // restore, keyed by layer.
    let mut baseline: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    for restore_round in [false, true] {
        let group: Vec<usize> = (0..writes.len())
            .filter(|&i| matches!(writes[i].target, CalTarget::RestoreFrom(_)) == restore_round)
            .collect();
        if group.is_empty() {
            continue;
        }
        let mut measured: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; writes.len()];
        run_forward(model, tokens, &[], |acts| {
            if !restore_round {
                baseline.insert(acts.layer, dot(acts.mlp_in.row(0), sink));
            }
            for &i in group.iter().filter(|&&i| writes[i].layer == acts.layer) {
                let w = &writes[i];
                let comp = w.positions.iter().map(|&p| dot(acts.mlp_in.row(p), sink)).collect();
                let resp = w
                    .positions
                    .iter()
                    .map(|&p| w.rows.iter().map(|&r| acts.gated.row(p)[r]).sum())
                    .collect();
                measured[i] = Some((comp, resp));
            }
            Ok(())
        })?;
        for &i in &group {
            let w = &writes[i];
            let (comp, resp) = measured[i].take().expect("every write layer is visited");
            let targets: Vec<f64> = match w.target {
                CalTarget::Remove(frac) => comp.iter().map(|c| -frac * c).collect(),
                CalTarget::RestoreFrom(l) => {
                    let orig = baseline[&l];
                    comp.iter().map(|c| orig - c).collect()
                }
            };
            let c = fit_coefficient(w, &comp, &resp, &targets)?;
            for &r in &w.rows {
                let col: Vec<f64> = sink.iter().map(|x| c * x).collect();
                set_col(&mut model.layers[w.layer].w_down, r, &col);
            }
            coefficients[i] = c;
        }
    }
    Ok(coefficients)
}

/// Least-squares scale mapping row responses onto targets, rejected when
/// any position misses its target by more than 5% of its sink component.
fn fit_coefficient(w: &CalibratedWrite, comp: &[f64], resp: &[f64], targets: &[f64]) -> Result<f64> {
    let layer = w.layer;
    let srr: f64 = resp.iter().map(|r| r * r).sum();
    if !(srr > 0.0 && srr.is_finite()) {
        return Err(Error::Calibration(format!(
            "rows at layer {layer} do not respond at the planted positions"
        )));
    }
    let c = targets.iter().zip(resp).map(|(t, r)| t * r).sum::<f64>() / srr;
    for ((t, r), (comp_p, &pos)) in targets.iter().zip(resp).zip(comp.iter().zip(&w.positions)) {
        if (t - c * r).abs() > 0.05 * comp_p.abs() {
            return Err(Error::Calibration(format!(
                "write at layer {layer} leaves {:.3e} of a {:.3e} sink component at position {pos}",
                (t - c * r).abs(),
                comp_p.abs()
            )));
        }
    }
    Ok(c)
}

/// Recalibrates the suppressor of `plant` in an already generated scenario,
/// e.g. after editing weights. A plant without a finite lifetime is left
/// unchanged. Plants sharing triggers share the suppressor, so all of them
/// are refitted together.
pub fn calibrate_suppressor(scenario: &mut Scenario, plant: usize) -> Result<()> {
    let truth = scenario
        .truth
        .plants
        .get(plant)
        .ok_or_else(|| Error::Index(format!("plant {plant} of {}", scenario.truth.plants.len())))?;
    let Some(layer) = truth.suppressor_layer else {
        return Ok(());
    };
    let sink = &scenario.truth.sink_direction;
    let lw = &scenario.model.layers[layer];
    // Suppressor rows are the ones whose up projection reads d and whose
    // gate reads one of this plant's triggers.
    let rows: Vec<usize> = (0..lw.w_up.rows())
        .filter(|&r| {
            (dot(lw.w_up.row(r), sink) - 1.0).abs() < 1e-9
                && truth.triggers.iter().any(|v| dot(lw.w_gate.row(r), v).abs() > 1e-9)
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Calibration(format!("plant {plant} has no suppressor rows at layer {layer}")));
    }
    let source = truth.trigger_source;
    let write = CalibratedWrite {
        layer,
        rows,
        positions: scenario
            .truth
            .plants
            .iter()
            .filter(|t| t.trigger_source == source)
            .flat_map(|t| t.positions.iter().copied())
            .collect(),
        target: CalTarget::Remove(1.0),
        plant: Some(source),
    };
    let c = calibrate(&mut scenario.model, &scenario.tokens, sink, std::slice::from_ref(&write))?;
    for t in scenario.truth.plants.iter_mut().filter(|t| t.trigger_source == source) {
        t.suppressor_coefficient = Some(c[0]);
    }
    Ok(())
}
