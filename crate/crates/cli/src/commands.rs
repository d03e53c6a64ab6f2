use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sinkscope::detect::{
    classify_levels, detect_runs, sink_score_table, sink_statistics, SinkClass, SinkRun,
};
use sinkscope::effect::{compensation, depth_profile, norm_correlation, Compensation, DepthProfile, NormCorrelation};
use sinkscope::formation::{
    cohort_mlp_inputs, mlp_cosine_trace, pca_probe, separability_by_layer, swap_experiment, ComparisonPolicy,
    CosineTrace, ProbeConfig, ProbeResult, SeparabilityCurve, SwapReport,
};
use sinkscope::model::{forward_with_capture, read_model, validate_model, write_model, Intervention, ToyModelSpec, SNKM_MAGIC};
use sinkscope::synth::{
    detection_scenario, generate_scenario, null_scenario, pca_scenario, staged_scenario, valley_scenario,
    ScenarioConfig,
};
use sinkscope::trace::{
    default_capture, parse_capture_list, validate, write_trace, CaptureField, TraceAccess, TraceReader, Violation,
    SNKT_MAGIC,
};

use crate::artifacts::{csv_bytes, json_bytes, read_json, Session};
use crate::config::PipelineConfig;
use crate::{Cli, Command, GlobalArgs, Preset, UsageError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokensFile {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Generate { scenario, preset } => generate(&g, scenario, preset),
        Command::Trace {
            model,
            tokens,
            interventions,
            capture,
        } => trace(&g, &model, &tokens, interventions.as_deref(), capture.as_deref()),
        Command::Detect { trace } => detect(&g, &trace),
        Command::Score { trace, positions } => score(&g, &trace, positions),
        Command::Formation {
            model,
            tokens,
            trace,
            runs,
            swap_layers,
        } => formation(&g, &model, &tokens, &trace, runs.as_deref(), swap_layers),
        Command::Effect {
            traces,
            runs,
            ratio_layers,
        } => effect(&g, &traces, &runs, ratio_layers),
        Command::Validate { file } => validate_file(&g, &file),
        Command::Report { inputs } => crate::report::report(&g, &inputs),
    }
}

fn open_trace(path: &Path) -> anyhow::Result<TraceReader<File>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    TraceReader::open(file).with_context(|| format!("reading trace {}", path.display()))
}

fn open_model(path: &Path) -> anyhow::Result<ToyModelSpec> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_model(file).with_context(|| format!("reading model {}", path.display()))
}

/// Runs from a `detect` output, or fresh detection on the trace.
fn load_runs<T: TraceAccess + ?Sized>(
    session: &mut Session,
    path: Option<&Path>,
    trace: &T,
    cfg: &PipelineConfig,
) -> anyhow::Result<Vec<SinkRun>> {
    match path {
        Some(p) => {
            session.input(p)?;
            read_json(p)
        }
        None => {
            let ext = detect_runs(trace, &cfg.detector)?;
            for w in &ext.warnings {
                log::warn!("{w}");
            }
            Ok(ext.runs)
        }
    }
}

/// Cohort-level failures that leave the rest of an analysis meaningful are
/// recorded in the report; everything else aborts the command.
fn soft<T>(r: sinkscope::Result<T>) -> anyhow::Result<Result<T, String>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e @ (sinkscope::Error::EmptyCohort(_) | sinkscope::Error::Rank { .. })) => Ok(Err(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn split<T>(r: Result<T, String>) -> (Option<T>, Option<String>) {
    match r {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e)),
    }
}

fn preset_config(preset: Preset, seed: u64) -> ScenarioConfig {
    match preset {
        Preset::Detection => detection_scenario(seed),
        Preset::Null => null_scenario(seed, true),
        Preset::Pca => pca_scenario(seed),
        Preset::Staged => staged_scenario(seed),
        Preset::Valley => valley_scenario(seed),
    }
}

fn generate(g: &GlobalArgs, scenario: Option<PathBuf>, preset: Option<Preset>) -> anyhow::Result<()> {
    let mut session = Session::new("generate", g.output.as_deref(), g.seed)?;
    let mut cfg = match (scenario, preset) {
        (Some(path), _) => {
            session.input(&path)?;
            read_json::<ScenarioConfig>(&path)?
        }
        (None, Some(p)) => preset_config(p, g.seed.unwrap_or(0)),
        (None, None) => return Err(UsageError("`generate` needs --scenario or --preset".into()).into()),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let sc = generate_scenario(&cfg)?;
    let mut model_bytes = Vec::new();
    write_model(&sc.model, &mut model_bytes)?;
    let tokens = TokensFile {
        ids: sc.tokens.clone(),
        tokens: sc.model.token_strings(&sc.tokens)?,
    };
    session.emit("model.snkm", &model_bytes, false)?;
    session.emit("tokens.json", &json_bytes(&tokens)?, false)?;
    session.emit("ground_truth.json", &json_bytes(&sc.truth)?, true)?;
    session.emit("scenario.json", &json_bytes(&cfg)?, false)?;
    session.finish(&cfg)
}

fn trace(
    g: &GlobalArgs,
    model_path: &Path,
    tokens_path: &Path,
    interventions: Option<&Path>,
    capture: Option<&str>,
) -> anyhow::Result<()> {
    let mut session = Session::new("trace", g.output.as_deref(), g.seed)?;
    let capture = match capture {
        Some(s) => parse_capture_list(s)?,
        None => default_capture(),
    };
    session.input(model_path)?;
    session.input(tokens_path)?;
    let model = open_model(model_path)?;
    let tokens: TokensFile = read_json(tokens_path)?;
    let interventions: Vec<Intervention> = match interventions {
        Some(p) => {
            session.input(p)?;
            read_json(p)?
        }
        None => Vec::new(),
    };
    let trace = forward_with_capture(&model, &tokens.ids, &capture, &interventions)?;
    let mut bytes = Vec::new();
    write_trace(&trace, &mut bytes)?;
    session.emit("trace.snkt", &bytes, true)?;
    let names: Vec<&str> = capture.iter().map(|f| f.name()).collect();
    session.finish(&serde_json::json!({ "capture": names }))
}

fn detect(g: &GlobalArgs, trace_path: &Path) -> anyhow::Result<()> {
    let cfg = PipelineConfig::resolve(g)?;
    let mut session = Session::new("detect", g.output.as_deref(), g.seed)?;
    session.input(trace_path)?;
    let reader = open_trace(trace_path)?;
    let ext = detect_runs(&reader, &cfg.detector)?;
    for w in &ext.warnings {
        log::warn!("{w}");
    }
    let levels = classify_levels(&ext.runs, &cfg.detector);
    let stats = sink_statistics(&ext.runs, reader.meta().seq_len, cfg.position_bin_width);
    session.emit("runs.json", &json_bytes(&ext.runs)?, true)?;
    session.emit("levels.json", &json_bytes(&levels)?, false)?;
    session.emit("stats.json", &json_bytes(&stats)?, false)?;
    session.finish(&cfg)
}

#[derive(Serialize)]
struct ScoreRow {
    layer: usize,
    position: usize,
    head: usize,
    score: f64,
}

fn score(g: &GlobalArgs, trace_path: &Path, positions: Vec<usize>) -> anyhow::Result<()> {
    let mut session = Session::new("score", g.output.as_deref(), g.seed)?;
    session.input(trace_path)?;
    let reader = open_trace(trace_path)?;
    let positions = if positions.is_empty() {
        (0..reader.meta().seq_len).collect()
    } else {
        positions
    };
    let table = sink_score_table(&reader, &positions)?;

    let mut rows = Vec::new();
    for (layer, per_pos) in table.per_head.iter().enumerate() {
        for (i, heads) in per_pos.iter().enumerate() {
            for (head, &score) in heads.iter().enumerate() {
                rows.push(ScoreRow {
                    layer,
                    position: positions[i],
                    head,
                    score,
                });
            }
        }
    }

    // One row per position, one column per layer.
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["position".to_string()];
    header.extend((0..table.scores.len()).map(|l| format!("layer_{l}")));
    w.write_record(&header)?;
    for (i, &p) in positions.iter().enumerate() {
        let mut record = vec![p.to_string()];
        record.extend(table.scores.iter().map(|row| row[i].to_string()));
        w.write_record(&record)?;
    }
    let profile = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;

    session.emit("scores.csv", &csv_bytes(rows)?, false)?;
    session.emit("profile.csv", &profile, true)?;
    session.finish(&serde_json::json!({ "positions": positions }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormationGroup {
    pub l_start: usize,
    pub positions: Vec<usize>,
    pub cosine: Option<CosineTrace>,
    pub probe: Option<ProbeResult>,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparabilityEntry {
    pub policy: ComparisonPolicy,
    pub curve: Option<SeparabilityCurve>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormationReport {
    pub groups: Vec<FormationGroup>,
    pub separability: Vec<SeparabilityEntry>,
    pub swap: Option<SwapReport>,
    pub swap_error: Option<String>,
}

fn formation_group(
    model: &ToyModelSpec,
    ids: &[usize],
    reader: &TraceReader<File>,
    runs: &[SinkRun],
    l_start: usize,
    positions: Vec<usize>,
    cfg: &PipelineConfig,
) -> anyhow::Result<FormationGroup> {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let (cosine, e) = split(soft(mlp_cosine_trace(model, ids, runs, l_start))?);
    errors.extend(e.map(|e| format!("cosine: {e}")));

    let probe = if positions.len() < 2 {
        errors.push(format!("probe: a cohort of {} cannot be decomposed", positions.len()));
        None
    } else {
        if positions.len() < cfg.formation.min_probe_cohort {
            warnings.push(format!(
                "probe: cohort of {} is below {}, components may be unstable",
                positions.len(),
                cfg.formation.min_probe_cohort
            ));
        }
        let x = cohort_mlp_inputs(model, ids, &positions, l_start - 1)?;
        let rec = reader.layer_field(l_start, CaptureField::Hidden)?;
        let sink_direction = rec.hidden()?.row(0).to_vec();
        let probe_cfg = ProbeConfig {
            k: cfg.probe.k.min(positions.len()),
            ..cfg.probe.clone()
        };
        let (probe, e) = split(soft(pca_probe(model, l_start - 1, &x, &sink_direction, &probe_cfg))?);
        errors.extend(e.map(|e| format!("probe: {e}")));
        probe
    };
    Ok(FormationGroup {
        l_start,
        positions,
        cosine,
        probe,
        errors,
        warnings,
    })
}

#[derive(Serialize)]
struct CosineRow {
    l_start: usize,
    position: usize,
    x: f64,
    post_norm: f64,
    gated: f64,
    f: f64,
    h_next: f64,
}

#[derive(Serialize)]
struct ProbeRow {
    l_start: usize,
    component: usize,
    explained_variance_ratio: f64,
    sign: i8,
    output_norm: f64,
    cos_to_sink: f64,
}

#[derive(Serialize)]
struct SeparabilityRow<'a> {
    policy: &'a str,
    layer: usize,
    site: &'a str,
    silhouette: f64,
    centroid_loo_accuracy: f64,
}

#[derive(Serialize)]
struct SwapRow<'a> {
    swap_layer: usize,
    site: &'a str,
    trials: usize,
    suppressed: usize,
    suppression_rate: f64,
}

fn policy_name(p: &ComparisonPolicy) -> &'static str {
    match p {
        ComparisonPolicy::Matched => "matched",
        ComparisonPolicy::Random { .. } => "random",
    }
}

fn formation(
    g: &GlobalArgs,
    model_path: &Path,
    tokens_path: &Path,
    trace_path: &Path,
    runs_path: Option<&Path>,
    swap_layers: Vec<usize>,
) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::resolve(g)?;
    if !swap_layers.is_empty() {
        cfg.formation.swap_layers = swap_layers;
    }
    let mut session = Session::new("formation", g.output.as_deref(), g.seed)?;
    for p in [model_path, tokens_path, trace_path] {
        session.input(p)?;
    }
    let model = open_model(model_path)?;
    let tokens: TokensFile = read_json(tokens_path)?;
    let reader = open_trace(trace_path)?;
    if tokens.ids.len() != reader.meta().seq_len {
        return Err(sinkscope::Error::Shape(format!(
            "{} token ids for a trace of {} positions",
            tokens.ids.len(),
            reader.meta().seq_len
        ))
        .into());
    }
    let runs = load_runs(&mut session, runs_path, &reader, &cfg)?;

    let mut by_l_start: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.class == SinkClass::Secondary && r.l_start > 0) {
        by_l_start.entry(r.l_start).or_default().push(r.position);
    }
    let groups = by_l_start
        .into_iter()
        .map(|(l, positions)| formation_group(&model, &tokens.ids, &reader, &runs, l, positions, &cfg))
        .collect::<anyhow::Result<Vec<_>>>()?;

    let separability = [
        ComparisonPolicy::Matched,
        ComparisonPolicy::Random {
            seed: cfg.formation.comparison_seed,
        },
    ]
    .into_iter()
    .map(|policy| {
        let (curve, error) = split(soft(separability_by_layer(&reader, &runs, policy))?);
        Ok(SeparabilityEntry { policy, curve, error })
    })
    .collect::<anyhow::Result<Vec<_>>>()?;

    let num_layers = model.config.num_layers;
    let swap_layers: Vec<usize> = if cfg.formation.swap_layers.is_empty() {
        match groups.first() {
            Some(first) => (0..=first.l_start).filter(|&l| l + 1 < num_layers).collect(),
            None => Vec::new(),
        }
    } else {
        cfg.formation.swap_layers.clone()
    };
    let (swap, swap_error) = split(soft(swap_experiment(
        &model,
        &tokens.ids,
        &runs,
        &swap_layers,
        &cfg.formation.sites,
        &cfg.detector,
    ))?);

    let report = FormationReport {
        groups,
        separability,
        swap,
        swap_error,
    };
    for g in &report.groups {
        for e in g.errors.iter().chain(&g.warnings) {
            log::warn!("l_start {}: {e}", g.l_start);
        }
    }

    let mut cosine_rows = Vec::new();
    let mut probe_rows = Vec::new();
    for grp in &report.groups {
        if let Some(c) = &grp.cosine {
            for (&position, v) in c.positions.iter().zip(&c.per_token) {
                cosine_rows.push(CosineRow {
                    l_start: grp.l_start,
                    position,
                    x: v[0],
                    post_norm: v[1],
                    gated: v[2],
                    f: v[3],
                    h_next: v[4],
                });
            }
        }
        if let Some(p) = &grp.probe {
            for e in &p.entries {
                probe_rows.push(ProbeRow {
                    l_start: grp.l_start,
                    component: e.component,
                    explained_variance_ratio: p.explained_variance_ratio[e.component],
                    sign: e.sign,
                    output_norm: e.output_norm,
                    cos_to_sink: e.cos_to_sink,
                });
            }
        }
    }
    let sep_rows: Vec<SeparabilityRow> = report
        .separability
        .iter()
        .filter_map(|s| s.curve.as_ref().map(|c| (policy_name(&s.policy), c)))
        .flat_map(|(policy, c)| {
            c.points.iter().map(move |p| SeparabilityRow {
                policy,
                layer: p.layer,
                site: p.site.name(),
                silhouette: p.silhouette,
                centroid_loo_accuracy: p.centroid_loo_accuracy,
            })
        })
        .collect();
    let swap_rows: Vec<SwapRow> = report
        .swap
        .iter()
        .flat_map(|s| &s.rates)
        .map(|r| SwapRow {
            swap_layer: r.swap_layer,
            site: r.site.name(),
            trials: r.trials,
            suppressed: r.suppressed,
            suppression_rate: r.suppression_rate,
        })
        .collect();

    session.emit("formation.json", &json_bytes(&report)?, true)?;
    session.emit("cosine.csv", &csv_bytes(cosine_rows)?, false)?;
    session.emit("probe.csv", &csv_bytes(probe_rows)?, false)?;
    session.emit("separability.csv", &csv_bytes(sep_rows)?, false)?;
    session.emit("swap.csv", &csv_bytes(swap_rows)?, false)?;
    session.finish(&cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEffect {
    /// Index of the trace in the order given.
    pub trace: usize,
    pub bos_profile: DepthProfile,
    pub secondary_profiles: Vec<DepthProfile>,
    pub compensation: Compensation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectReport {
    pub traces: Vec<TraceEffect>,
    pub correlation: Option<NormCorrelation>,
    pub correlation_error: Option<String>,
}

#[derive(Serialize)]
struct ProfileRow {
    trace: usize,
    position: usize,
    layer: usize,
    score: f64,
}

#[derive(Serialize)]
struct CorrelationRow {
    trace: usize,
    position: usize,
    l_start: usize,
    lifetime: usize,
    log_norm: f64,
    layer: Option<usize>,
    score_ratio: Option<f64>,
}

fn effect(g: &GlobalArgs, trace_paths: &[PathBuf], runs_paths: &[PathBuf], ratio_layers: Vec<usize>) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::resolve(g)?;
    if !ratio_layers.is_empty() {
        cfg.effect.ratio_layers = ratio_layers;
    }
    if !runs_paths.is_empty() && runs_paths.len() != trace_paths.len() {
        return Err(UsageError(format!(
            "{} --runs files for {} --trace files",
            runs_paths.len(),
            trace_paths.len()
        ))
        .into());
    }
    let mut session = Session::new("effect", g.output.as_deref(), g.seed)?;
    let mut readers = Vec::new();
    let mut all_runs = Vec::new();
    for (i, path) in trace_paths.iter().enumerate() {
        session.input(path)?;
        let reader = open_trace(path)?;
        let runs = load_runs(&mut session, runs_paths.get(i).map(PathBuf::as_path), &reader, &cfg)?;
        readers.push(reader);
        all_runs.push(runs);
    }

    let mut traces = Vec::new();
    for (i, (reader, runs)) in readers.iter().zip(&all_runs).enumerate() {
        let bos_profile = depth_profile(reader, 0)?;
        let secondary_profiles = runs
            .iter()
            .filter(|r| r.class == SinkClass::Secondary)
            .map(|r| depth_profile(reader, r.position))
            .collect::<sinkscope::Result<Vec<_>>>()?;
        let compensation = compensation(&bos_profile, runs);
        traces.push(TraceEffect {
            trace: i,
            bos_profile,
            secondary_profiles,
            compensation,
        });
    }
    let inputs: Vec<(&TraceReader<File>, &[SinkRun])> =
        readers.iter().zip(&all_runs).map(|(r, runs)| (r, runs.as_slice())).collect();
    let (correlation, correlation_error) = split(soft(norm_correlation(&inputs, &cfg.effect.ratio_layers))?);
    if let Some(c) = &correlation {
        for w in &c.warnings {
            log::warn!("{w}");
        }
    }
    let report = EffectReport {
        traces,
        correlation,
        correlation_error,
    };

    let mut profile_rows = Vec::new();
    for t in &report.traces {
        for p in std::iter::once(&t.bos_profile).chain(&t.secondary_profiles) {
            for (layer, &score) in p.scores.iter().enumerate() {
                profile_rows.push(ProfileRow {
                    trace: t.trace,
                    position: p.position,
                    layer,
                    score,
                });
            }
        }
    }
    let mut corr_rows = Vec::new();
    for s in report.correlation.iter().flat_map(|c| &c.samples) {
        let base = |layer, score_ratio| CorrelationRow {
            trace: s.trace,
            position: s.position,
            l_start: s.l_start,
            lifetime: s.lifetime,
            log_norm: s.log_norm,
            layer,
            score_ratio,
        };
        if s.score_ratios.is_empty() {
            corr_rows.push(base(None, None));
        }
        for &(l, r) in &s.score_ratios {
            corr_rows.push(base(Some(l), Some(r)));
        }
    }

    session.emit("effect.json", &json_bytes(&report)?, true)?;
    session.emit("profile.csv", &csv_bytes(profile_rows)?, false)?;
    session.emit("correlation.csv", &csv_bytes(corr_rows)?, false)?;
    session.finish(&cfg)
}

fn validate_file(g: &GlobalArgs, path: &Path) -> anyhow::Result<()> {
    let output = g.output.as_deref().unwrap_or("-");
    let mut session = Session::new("validate", Some(output), g.seed)?;
    session.input(path)?;
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut magic = [0u8; 4];
    let violations = match file.read_exact(&mut magic) {
        Err(_) => vec![Violation::general("file is shorter than a magic number")],
        Ok(()) if &magic == SNKT_MAGIC => validate(&file)?,
        Ok(()) if &magic == SNKM_MAGIC => validate_model(&file)?,
        Ok(()) => vec![Violation::general(format!("unknown magic {magic:?}"))],
    };
    session.emit("validate.json", &json_bytes(&violations)?, true)?;
    session.finish(&serde_json::json!({}))?;
    if violations.is_empty() {
        Ok(())
    } else {
        for v in &violations {
            log::error!("{}", v.message);
        }
        Err(sinkscope::Error::Format(format!("{} violation(s) in {}", violations.len(), path.display())).into())
    }
}
