use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sinkscope::detect::{SinkLevel, SinkRun, SinkStatistics};
use sinkscope::formation::ComparisonPolicy;
use sinkscope::model::Site;

use crate::artifacts::{csv_bytes, read_json, RunManifest, Session};
use crate::commands::{EffectReport, FormationReport};
use crate::GlobalArgs;

/// Everything `report` understands from one pipeline output directory.
struct Bundle {
    runs: Option<Vec<SinkRun>>,
    levels: Option<Vec<SinkLevel>>,
    stats: Option<SinkStatistics>,
    formation: Option<FormationReport>,
    effect: Option<EffectReport>,
}

fn optional<T: DeserializeOwned>(dir: &Path, name: &str, session: &mut Session) -> anyhow::Result<Option<T>> {
    let path = dir.join(name);
    if !path.is_file() {
        return Ok(None);
    }
    session.input(&path)?;
    read_json(&path).map(Some)
}

fn manifests(dir: &Path) -> anyhow::Result<Vec<(PathBuf, RunManifest)>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let is_manifest = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(".manifest.json"));
        if is_manifest {
            let m: RunManifest = read_json(&path)?;
            found.push((path, m));
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found)
}

fn check_versions(inputs: &[PathBuf]) -> anyhow::Result<()> {
    let mut versions: BTreeSet<String> = BTreeSet::new();
    let mut first: Option<(PathBuf, String)> = None;
    for dir in inputs {
        let found = manifests(dir)?;
        if found.is_empty() {
            return Err(sinkscope::Error::Format(format!("{} contains no run manifest", dir.display())).into());
        }
        for (path, m) in found {
            if versions.insert(m.tool_version.clone()) && versions.len() > 1 {
                let (p0, v0) = first.clone().expect("an earlier version was recorded");
                return Err(sinkscope::Error::Format(format!(
                    "mixed tool versions: {} has {}, {} has {}",
                    p0.display(),
                    v0,
                    path.display(),
                    m.tool_version
                ))
                .into());
            }
            first.get_or_insert((path, m.tool_version));
        }
    }
    Ok(())
}

fn policy_label(p: &ComparisonPolicy) -> String {
    match p {
        ComparisonPolicy::Matched => "matched tokens".into(),
        ComparisonPolicy::Random { seed } => format!("random tokens, seed {seed}"),
    }
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

#[derive(Serialize)]
struct RunRow<'a> {
    input: usize,
    position: usize,
    token: &'a str,
    class: &'a str,
    l_start: usize,
    lifetime: usize,
    reaches_end: bool,
    peak_norm_ratio: f64,
}

#[derive(Serialize)]
struct LevelRow {
    input: usize,
    l_start: usize,
    lifetime: usize,
    members: usize,
}

#[derive(Serialize)]
struct PositionRow {
    input: usize,
    bin_start: f64,
    count: usize,
    density: f64,
}

#[derive(Serialize)]
struct TokenRow<'a> {
    input: usize,
    token: &'a str,
    count: usize,
    share: f64,
}

#[derive(Serialize)]
struct CosineSummaryRow {
    input: usize,
    l_start: usize,
    stage: &'static str,
    median: f64,
    q1: f64,
    q3: f64,
}

#[derive(Serialize)]
struct SwapRow {
    input: usize,
    swap_layer: usize,
    site: &'static str,
    suppression_rate: f64,
}

#[derive(Serialize)]
struct ProfileRow {
    input: usize,
    trace: usize,
    layer: usize,
    bos_score: f64,
}

#[derive(Serialize)]
struct FitRow {
    input: usize,
    layer: usize,
    slope: Option<f64>,
    intercept: Option<f64>,
    r2: Option<f64>,
    n: Option<usize>,
    error: Option<String>,
}

pub fn report(g: &GlobalArgs, inputs: &[PathBuf]) -> anyhow::Result<()> {
    check_versions(inputs)?;
    let mut session = Session::new("report", g.output.as_deref(), g.seed)?;
    let mut bundles = Vec::new();
    for dir in inputs {
        bundles.push(Bundle {
            runs: optional(dir, "runs.json", &mut session)?,
            levels: optional(dir, "levels.json", &mut session)?,
            stats: optional(dir, "stats.json", &mut session)?,
            formation: optional(dir, "formation.json", &mut session)?,
            effect: optional(dir, "effect.json", &mut session)?,
        });
    }

    let mut md = String::from("# Sink analysis report\n\n");
    let mut run_rows = Vec::new();
    let mut level_rows = Vec::new();
    let mut position_rows = Vec::new();
    let mut token_rows = Vec::new();
    let mut cosine_rows = Vec::new();
    let mut swap_rows = Vec::new();
    let mut profile_rows = Vec::new();
    let mut fit_rows = Vec::new();

    for (i, b) in bundles.iter().enumerate() {
        writeln!(md, "## Input {i}\n")?;

        if let Some(runs) = &b.runs {
            let secondary = runs.iter().filter(|r| r.class == sinkscope::detect::SinkClass::Secondary).count();
            writeln!(md, "### Sinks\n\n{} runs, {} secondary.\n", runs.len(), secondary)?;
            if !runs.is_empty() {
                writeln!(md, "| position | token | class | l_start | lifetime |\n|---|---|---|---|---|")?;
                for r in runs {
                    let class = match r.class {
                        sinkscope::detect::SinkClass::Primary => "primary",
                        sinkscope::detect::SinkClass::Secondary => "secondary",
                    };
                    writeln!(md, "| {} | `{}` | {} | {} | {} |", r.position, r.token, class, r.l_start, r.lifetime)?;
                    run_rows.push(RunRow {
                        input: i,
                        position: r.position,
                        token: &r.token,
                        class,
                        l_start: r.l_start,
                        lifetime: r.lifetime,
                        reaches_end: r.reaches_end,
                        peak_norm_ratio: r.peak_norm_ratio,
                    });
                }
                md.push('\n');
            }
        }

        if let Some(levels) = &b.levels {
            writeln!(md, "### Sink levels\n\n{} level(s).\n", levels.len())?;
            if !levels.is_empty() {
                writeln!(md, "| l_start | lifetime | members |\n|---|---|---|")?;
                for lv in levels {
                    writeln!(md, "| {} | {} | {} |", lv.representative.0, lv.representative.1, lv.member_count)?;
                    level_rows.push(LevelRow {
                        input: i,
                        l_start: lv.representative.0,
                        lifetime: lv.representative.1,
                        members: lv.member_count,
                    });
                }
                md.push('\n');
            }
        }

        if let Some(stats) = &b.stats {
            writeln!(md, "### Position and token statistics\n")?;
            let h = &stats.position_histogram;
            for (j, (&count, &density)) in h.counts.iter().zip(&h.density).enumerate() {
                position_rows.push(PositionRow {
                    input: i,
                    bin_start: j as f64 * h.bin_width,
                    count,
                    density,
                });
            }
            if stats.token_table.is_empty() {
                writeln!(md, "No secondary sinks.\n")?;
            } else {
                writeln!(md, "| token | count | share |\n|---|---|---|")?;
                for t in &stats.token_table {
                    writeln!(md, "| `{}` | {} | {} |", t.token, t.count, f(t.share))?;
                    token_rows.push(TokenRow {
                        input: i,
                        token: &t.token,
                        count: t.count,
                        share: t.share,
                    });
                }
                md.push('\n');
            }
        }

        if let Some(fr) = &b.formation {
            writeln!(md, "### Formation\n")?;
            for grp in &fr.groups {
                writeln!(md, "Sinks starting at layer {} ({} tokens).\n", grp.l_start, grp.positions.len())?;
                if let Some(c) = &grp.cosine {
                    writeln!(md, "| stage | median cosine |\n|---|---|")?;
                    for s in &c.summary {
                        writeln!(md, "| {} | {} |", s.stage.name(), f(s.median))?;
                        cosine_rows.push(CosineSummaryRow {
                            input: i,
                            l_start: grp.l_start,
                            stage: s.stage.name(),
                            median: s.median,
                            q1: s.q1,
                            q3: s.q3,
                        });
                    }
                    md.push('\n');
                }
                if let Some(p) = &grp.probe {
                    writeln!(md, "| component | variance | sign | output norm | cosine to sink |\n|---|---|---|---|---|")?;
                    for e in &p.entries {
                        let sign = if e.sign > 0 { "+" } else { "-" };
                        writeln!(
                            md,
                            "| {} | {} | {} | {} | {} |",
                            e.component,
                            f(p.explained_variance_ratio[e.component]),
                            sign,
                            f(e.output_norm),
                            f(e.cos_to_sink)
                        )?;
                    }
                    md.push('\n');
                }
                for e in grp.errors.iter().chain(&grp.warnings) {
                    writeln!(md, "- {e}")?;
                }
                if !grp.errors.is_empty() || !grp.warnings.is_empty() {
                    md.push('\n');
                }
            }
            for s in &fr.separability {
                match (&s.curve, &s.error) {
                    (Some(c), _) => {
                        let acc: Vec<String> = c.series(Site::Hidden).map(|p| f(p.centroid_loo_accuracy)).collect();
                        writeln!(md, "Separability ({}), hidden-state accuracy by layer: {}\n", policy_label(&s.policy), acc.join(", "))?;
                    }
                    (None, Some(e)) => writeln!(md, "Separability ({}): {e}\n", policy_label(&s.policy))?,
                    (None, None) => {}
                }
            }
            if let Some(sw) = &fr.swap {
                writeln!(md, "| swap layer | site | suppression rate |\n|---|---|---|")?;
                for r in &sw.rates {
                    writeln!(md, "| {} | {} | {} |", r.swap_layer, r.site.name(), f(r.suppression_rate))?;
                    swap_rows.push(SwapRow {
                        input: i,
                        swap_layer: r.swap_layer,
                        site: r.site.name(),
                        suppression_rate: r.suppression_rate,
                    });
                }
                md.push('\n');
            }
            if let Some(e) = &fr.swap_error {
                writeln!(md, "Swap experiment: {e}\n")?;
            }
        }

        if let Some(er) = &b.effect {
            writeln!(md, "### Effect\n")?;
            writeln!(md, "| trace | valley layer | valley depth | valley window | secondary in window | uniform |\n|---|---|---|---|---|---|")?;
            for t in &er.traces {
                let p = &t.bos_profile;
                let c = &t.compensation;
                writeln!(
                    md,
                    "| {} | {} | {} | {}..={} | {}/{} | {} |",
                    t.trace,
                    p.valley_layer,
                    f(p.valley_depth),
                    c.valley_window.0,
                    c.valley_window.1,
                    c.secondary_in_window,
                    c.secondary_total,
                    f(c.uniform_fraction)
                )?;
                for (layer, &bos_score) in p.scores.iter().enumerate() {
                    profile_rows.push(ProfileRow {
                        input: i,
                        trace: t.trace,
                        layer,
                        bos_score,
                    });
                }
            }
            md.push('\n');
            match (&er.correlation, &er.correlation_error) {
                (Some(c), _) => {
                    match (c.lifetime_spearman, &c.lifetime_spearman_error) {
                        (Some(r), _) => writeln!(md, "Spearman(log norm, lifetime) = {} over {} runs.\n", f(r), c.samples.len())?,
                        (None, Some(e)) => writeln!(md, "Spearman(log norm, lifetime): {e}\n")?,
                        (None, None) => {}
                    }
                    for rf in &c.ratio_fits {
                        fit_rows.push(FitRow {
                            input: i,
                            layer: rf.layer,
                            slope: rf.fit.map(|x| x.slope),
                            intercept: rf.fit.map(|x| x.intercept),
                            r2: rf.fit.map(|x| x.r2),
                            n: rf.fit.map(|x| x.n),
                            error: rf.error.clone(),
                        });
                    }
                }
                (None, Some(e)) => writeln!(md, "Norm correlation: {e}\n")?,
                (None, None) => {}
            }
        }
    }

    session.emit("report.md", md.as_bytes(), true)?;
    session.emit("runs.csv", &csv_bytes(run_rows)?, false)?;
    session.emit("levels.csv", &csv_bytes(level_rows)?, false)?;
    session.emit("positions.csv", &csv_bytes(position_rows)?, false)?;
    session.emit("tokens.csv", &csv_bytes(token_rows)?, false)?;
    session.emit("cosine_summary.csv", &csv_bytes(cosine_rows)?, false)?;
    session.emit("swap.csv", &csv_bytes(swap_rows)?, false)?;
    session.emit("bos_profile.csv", &csv_bytes(profile_rows)?, false)?;
    session.emit("ratio_fits.csv", &csv_bytes(fit_rows)?, false)?;
    session.finish(&serde_json::json!({ "inputs": inputs.len() }))
}
