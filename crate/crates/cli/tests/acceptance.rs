//! Acceptance suite: one line per criterion, each checked at its stated
//! tolerance and time budget. Runs as a plain binary (`harness = false`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinkscope::detect::{detect_runs, sink_score, DetectorConfig, HeadSelection, SinkClass, SinkRun};
use sinkscope::effect::norm_correlation;
use sinkscope::formation::{cohort_mlp_inputs, pca_probe, swap_experiment, ProbeConfig};
use sinkscope::linalg::{spearman_rho, Matrix};
use sinkscope::model::{rope_apply, Site};
use sinkscope::synth::{
    detection_scenario, gain_grid, gain_lifetime_grid, generate_scenario, null_scenario, pca_scenario,
    staged_scenario, ScenarioConfig,
};
use sinkscope::trace::{
    default_capture, validate, write_trace, ActivationTrace, CaptureField, LayerRecord, TraceMeta, TraceReader,
};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    check: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn traced(cfg: &ScenarioConfig) -> Result<(sinkscope::synth::Scenario, ActivationTrace, Vec<SinkRun>), String> {
    let sc = generate_scenario(cfg).map_err(|e| format!("{}: {e}", cfg.name))?;
    let trace = sc.trace(&default_capture()).map_err(|e| e.to_string())?;
    let runs = detect_runs(&trace, &DetectorConfig::default()).map_err(|e| e.to_string())?.runs;
    Ok((sc, trace, runs))
}

fn meta(t: usize, heads: usize, captured: &[CaptureField]) -> TraceMeta {
    TraceMeta {
        model_name: "acceptance".into(),
        num_layers: 1,
        hidden_size: heads,
        num_heads: heads,
        head_dim: 1,
        seq_len: t,
        rope_base: 1e4,
        tokens: (0..t).map(|i| i.to_string()).collect(),
        captured: captured.iter().copied().collect(),
        mlp_inner: None,
    }
}

/// Random causal row-stochastic weights as nested vectors `[head][t][k]`.
fn random_attention(rng: &mut ChaCha8Rng, t: usize, heads: usize) -> Vec<Vec<Vec<f64>>> {
    (0..heads)
        .map(|_| {
            (0..t)
                .map(|row| {
                    let raw: Vec<f64> = (0..t)
                        .map(|k| if k <= row { rng.random_range(0.0..1.0f64).powi(3) + 1e-6 } else { 0.0 })
                        .collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect()
        })
        .collect()
}

fn sink_score_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut worst_mass) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let t = rng.random_range(1..=64);
        let heads = rng.random_range(1..=8);
        let a = random_attention(&mut rng, t, heads);
        let trace = ActivationTrace {
            meta: meta(t, heads, &[CaptureField::AttnWeights]),
            layers: vec![LayerRecord {
                attn_weights: Some(
                    a.iter()
                        .map(|h| Matrix::new(t, t, h.iter().flatten().copied().collect()).unwrap())
                        .collect(),
                ),
                ..LayerRecord::default()
            }],
        };
        let mut mass = 0.0;
        for k in 0..t {
            let mut total = 0.0;
            for (hi, head) in a.iter().enumerate() {
                let mut s = 0.0;
                for row in head.iter().skip(k) {
                    s += row[k];
                }
                let per_head = s / (t - k) as f64;
                let got = sink_score(&trace, k, 0, HeadSelection::Head(hi)).map_err(|e| e.to_string())?;
                worst = worst.max((got - per_head).abs());
                total += per_head;
            }
            let oracle = total / heads as f64;
            let got = sink_score(&trace, k, 0, HeadSelection::All).map_err(|e| e.to_string())?;
            worst = worst.max((got - oracle).abs());
            mass += (t - k) as f64 * got;
        }
        worst_mass = worst_mass.max((mass - t as f64).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    ensure(worst_mass <= 1e-4, || format!("mass identity off by {worst_mass:e}"))?;
    Ok(format!("50 tensors, max |diff| {worst:.1e}, max mass error {worst_mass:.1e}"))
}

fn planted_detection() -> Outcome {
    let (mut plants, mut exact, mut near) = (0usize, 0usize, 0usize);
    for seed in 0..100 {
        let cfg = detection_scenario(seed);
        ensure(cfg.num_layers <= 32 && cfg.hidden_size <= 128 && cfg.seq_len <= 512, || {
            format!("seed {seed}: scenario outside the size limits")
        })?;
        let (sc, _, runs) = traced(&cfg)?;
        let truth: BTreeMap<usize, (usize, usize)> =
            sc.truth.secondary().map(|s| (s.position, (s.l_start, s.lifetime))).collect();
        let found: BTreeMap<usize, (usize, usize)> = runs
            .iter()
            .filter(|r| r.class == SinkClass::Secondary)
            .map(|r| (r.position, (r.l_start, r.lifetime)))
            .collect();
        let (tk, fk): (BTreeSet<_>, BTreeSet<_>) = (truth.keys().collect(), found.keys().collect());
        ensure(tk == fk, || format!("seed {seed}: planted {tk:?}, detected {fk:?}"))?;
        for (p, want) in &truth {
            let got = found[p];
            plants += 1;
            exact += usize::from(got == *want);
            near += usize::from(got.0.abs_diff(want.0) <= 1 && got.1.abs_diff(want.1) <= 1);
        }
    }
    let mut false_positives = 0;
    for seed in 0..20 {
        let (_, _, runs) = traced(&null_scenario(seed, true))?;
        false_positives += runs.iter().filter(|r| r.class == SinkClass::Secondary).count();
    }
    let exact_rate = exact as f64 / plants as f64;
    ensure(exact_rate >= 0.95, || format!("(l_start, lifetime) exact for {exact}/{plants}"))?;
    ensure(near == plants, || format!("within one layer for {near}/{plants}"))?;
    ensure(false_positives == 0, || format!("{false_positives} false positives on null scenarios"))?;
    Ok(format!(
        "precision = recall = 1 over 100 seeds, {exact}/{plants} exact, {near}/{plants} within ±1, 0 false positives over 20 null seeds"
    ))
}

fn monotonicity() -> Outcome {
    let gains: Vec<f64> = (1..=10).map(|i| 2f64.powi(i)).collect();
    let mut scores = Vec::new();
    for cfg in gain_grid(0, &gains) {
        let (_, trace, runs) = traced(&cfg)?;
        let run = runs
            .iter()
            .find(|r| r.position == 40)
            .ok_or_else(|| format!("{}: sink at 40 not detected", cfg.name))?;
        scores.push(sink_score(&trace, 40, run.l_start + 1, HeadSelection::All).map_err(|e| e.to_string())?);
    }
    let strictly = scores.windows(2).all(|w| w[1] > w[0]);
    let rho_gain = spearman_rho(&gains, &scores).map_err(|e| e.to_string())?;
    ensure(strictly && rho_gain == 1.0, || format!("scores {scores:?}"))?;

    let pairs: Vec<(f64, usize)> = (0..6).map(|i| (4.0 * 2f64.powi(i), 2 + 2 * i as usize)).collect();
    let data = gain_lifetime_grid(1, &pairs)
        .iter()
        .map(traced)
        .collect::<Result<Vec<_>, _>>()?;
    let inputs: Vec<(&ActivationTrace, &[SinkRun])> = data.iter().map(|(_, t, r)| (t, r.as_slice())).collect();
    let nc = norm_correlation(&inputs, &[]).map_err(|e| e.to_string())?;
    let rho_life = nc
        .lifetime_spearman
        .ok_or_else(|| format!("no Spearman: {:?}", nc.lifetime_spearman_error))?;
    ensure(rho_life == 1.0, || format!("Spearman(log norm, lifetime) = {rho_life}"))?;
    Ok(format!(
        "gain grid 2..1024: Spearman(gain, score) = {rho_gain}; co-varying grid: Spearman(log norm, lifetime) = {rho_life}"
    ))
}

fn pca_asymmetry() -> Outcome {
    let (mut min_var, mut min_cos, mut min_ratio) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for seed in 0..20 {
        let sc = generate_scenario(&pca_scenario(seed)).map_err(|e| e.to_string())?;
        let truth = &sc.truth.plants[0];
        let layer = truth.amplifier_layer;
        let x = cohort_mlp_inputs(&sc.model, &sc.tokens, &truth.positions, layer).map_err(|e| e.to_string())?;
        let res = pca_probe(&sc.model, layer, &x, &sc.truth.sink_direction, &ProbeConfig::default())
            .map_err(|e| e.to_string())?;
        let var: f64 = res.explained_variance_ratio.iter().take(3).sum();
        min_var = min_var.min(var);
        ensure(var >= 0.95, || format!("seed {seed}: top-3 variance {var}"))?;
        for pc in 0..3 {
            // Only one sign can out-produce the other tenfold, so this is the
            // "exactly one sign" condition.
            let strong = res.dominant(pc).ok_or("missing probe entries")?;
            let ratio = res.sign_ratio(pc).ok_or("missing probe entries")?;
            ensure(strong.cos_to_sink >= 0.99 && ratio >= 10.0, || {
                format!("seed {seed}, PC {pc}: {:?}", &res.entries[2 * pc..2 * pc + 2])
            })?;
            min_cos = min_cos.min(strong.cos_to_sink);
            min_ratio = min_ratio.min(ratio);
        }
    }
    Ok(format!(
        "20 seeds: min top-3 variance {min_var:.4}, min aligned cos {min_cos:.4}, min norm ratio {min_ratio:.1}"
    ))
}

fn swap_ordering() -> Outcome {
    let (sc, _, runs) = traced(&staged_scenario(0))?;
    let l_start = runs
        .iter()
        .filter(|r| r.class == SinkClass::Secondary)
        .map(|r| r.l_start)
        .min()
        .ok_or("no secondary sinks detected")?;
    let layers: Vec<usize> = (0..=l_start).collect();
    let report = swap_experiment(&sc.model, &sc.tokens, &runs, &layers, &[Site::Hidden], &DetectorConfig::default())
        .map_err(|e| e.to_string())?;
    let rates: Vec<f64> = layers.iter().map(|&l| report.rate(l, Site::Hidden).unwrap()).collect();
    ensure(rates.windows(2).all(|w| w[1] >= w[0]), || format!("rates {rates:?}"))?;
    ensure(rates[l_start] == 1.0, || format!("rate at l_start {l_start} is {}", rates[l_start]))?;
    let shown: Vec<String> = rates.iter().map(|r| format!("{r:.2}")).collect();
    Ok(format!("hidden-site rates over layers 0..={l_start}: [{}]", shown.join(", ")))
}

fn rope_relative() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for base in [1e4, 1e6] {
        for _ in 0..1000 {
            let dim = 2 * rng.random_range(1..=32);
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (m, n, s) = (rng.random_range(0..2048), rng.random_range(0..2048), rng.random_range(0..2048));
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let ip = |m: usize, n: usize| -> Result<f64, String> {
                let rq = rope_apply(&q, m, base).map_err(|e| e.to_string())?;
                let rk = rope_apply(&k, n, base).map_err(|e| e.to_string())?;
                Ok(dot(&rq, &rk))
            };
            worst = worst.max((ip(m, n)? - ip(m + s, n + s)?).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("2000 tuples over θ ∈ {{1e4, 1e6}}, max deviation {worst:.1e}"))
}

fn random_trace(rng: &mut ChaCha8Rng) -> ActivationTrace {
    let heads = rng.random_range(1..=3);
    let head_dim = rng.random_range(1..=4);
    let (t, layers, h) = (rng.random_range(1..=10), rng.random_range(1..=3), heads * head_dim);
    let mlp_inner = rng.random_range(1..=4);
    let captured: BTreeSet<CaptureField> =
        CaptureField::ALL.into_iter().filter(|_| rng.random_bool(0.5)).collect();
    let has = |f| captured.contains(&f);
    let mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-3.0f32..3.0) as f64).collect()).unwrap()
    };
    let records = (0..layers)
        .map(|_| LayerRecord {
            hidden: has(CaptureField::Hidden).then(|| mat(rng, t, h)),
            attn_out: has(CaptureField::AttnOut).then(|| mat(rng, t, h)),
            mlp_out: has(CaptureField::MlpOut).then(|| mat(rng, t, h)),
            attn_weights: has(CaptureField::AttnWeights).then(|| {
                random_attention(rng, t, heads)
                    .into_iter()
                    .map(|hd| {
                        let flat = hd.iter().flatten().map(|&v| v as f32 as f64).collect();
                        Matrix::new(t, t, flat).unwrap()
                    })
                    .collect()
            }),
            key_norms: has(CaptureField::KeyNorms).then(|| (0..t).map(|_| rng.random_range(0.0f32..2.0) as f64).collect()),
            value_norms: has(CaptureField::ValueNorms)
                .then(|| (0..t).map(|_| rng.random_range(0.0f32..2.0) as f64).collect()),
            mlp_intermediates: has(CaptureField::MlpIntermediates).then(|| mat(rng, t, 2 * h + 3 * mlp_inner)),
        })
        .collect();
    ActivationTrace {
        meta: TraceMeta {
            model_name: "acceptance".into(),
            num_layers: layers,
            hidden_size: h,
            num_heads: heads,
            head_dim,
            seq_len: t,
            rope_base: 1e4,
            tokens: (0..t).map(|i| format!("tok{i}")).collect(),
            mlp_inner: has(CaptureField::MlpIntermediates).then_some(mlp_inner),
            captured,
        },
        layers: records,
    }
}

fn bytes_of(trace: &ActivationTrace) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    write_trace(trace, &mut out).map_err(|e| e.to_string())?;
    Ok(out)
}

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for case in 0..200 {
        let trace = random_trace(&mut rng);
        let bytes = bytes_of(&trace)?;
        let back = TraceReader::open(bytes.clone())
            .and_then(|r| r.load_all())
            .map_err(|e| format!("case {case}: {e}"))?;
        ensure(back == trace && bytes_of(&back)? == bytes, || format!("case {case}: round trip differs"))?;
        let violations = validate(&bytes).map_err(|e| e.to_string())?;
        ensure(violations.is_empty(), || format!("case {case}: {violations:?}"))?;
    }

    let mut base_rng = ChaCha8Rng::seed_from_u64(31);
    let base = loop {
        let t = random_trace(&mut base_rng);
        if t.meta.has(CaptureField::AttnWeights) && t.meta.has(CaptureField::Hidden) && t.meta.seq_len >= 3 {
            break t;
        }
    };
    let good = bytes_of(&base)?;
    let payload = 16 + u64::from_le_bytes(good[8..16].try_into().unwrap()) as usize;
    let mut fixtures: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut flipped = good.clone();
    flipped[payload + 1] ^= 0x10;
    fixtures.push(("flipped payload byte", flipped));
    fixtures.push(("truncated payload", good[..good.len() - 3].to_vec()));
    fixtures.push(("truncated preamble", good[..7].to_vec()));
    let mut magic = good.clone();
    magic[1] = b'?';
    fixtures.push(("bad magic", magic));
    let mut version = good.clone();
    version[4] = 7;
    fixtures.push(("unknown version", version));
    let mut header = good.clone();
    header[16] = b'!';
    fixtures.push(("garbage header", header));
    let mut edit = |name: &'static str, f: &dyn Fn(&mut LayerRecord)| -> Result<(), String> {
        let mut t = base.clone();
        f(&mut t.layers[0]);
        fixtures.push((name, bytes_of(&t)?));
        Ok(())
    };
    edit("row sum", &|r| r.attn_weights.as_mut().unwrap()[0][(2, 0)] += 0.5)?;
    edit("causal mask", &|r| r.attn_weights.as_mut().unwrap()[0][(0, 2)] = 0.25)?;
    edit("non-finite hidden", &|r| r.hidden.as_mut().unwrap()[(1, 0)] = f64::INFINITY)?;
    let n = fixtures.len();
    for (name, bytes) in &fixtures {
        let v = validate(bytes).map_err(|e| e.to_string())?;
        ensure(!v.is_empty(), || format!("fixture `{name}` not caught"))?;
    }
    Ok(format!("200 round trips bit-exact; {n}/{n} corruption fixtures caught"))
}

fn run_pipeline(bin: &Path, dir: &Path) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let steps: &[&[&str]] = &[
        &["generate", "--preset", "staged", "--seed", "5", "-o", "gen"],
        &["trace", "--model", "gen/model.snkm", "--tokens", "gen/tokens.json", "-o", "trace"],
        &["detect", "--trace", "trace/trace.snkt", "-o", "detect"],
        &["score", "--trace", "trace/trace.snkt", "--position", "0,1,2", "-o", "score"],
        &[
            "formation", "--model", "gen/model.snkm", "--tokens", "gen/tokens.json", "--trace", "trace/trace.snkt",
            "--runs", "detect/runs.json", "--seed", "5", "-o", "formation",
        ],
        &["effect", "--trace", "trace/trace.snkt", "--runs", "detect/runs.json", "-o", "effect"],
        &["report", "--input", "detect", "--input", "formation", "--input", "effect", "-o", "report"],
    ];
    for args in steps {
        let out = Command::new(bin)
            .args(*args)
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
        })?;
    }
    Ok(())
}

fn collect(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, root, out)?;
        } else if !path.to_string_lossy().ends_with(".manifest.json") {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&path)?);
        }
    }
    Ok(())
}

fn determinism() -> Outcome {
    let bin = Path::new(env!("CARGO_BIN_EXE_sinkscope"));
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let dir = tmp.path().join(name);
        run_pipeline(bin, &dir)?;
        let mut files = BTreeMap::new();
        collect(&dir, &dir, &mut files).map_err(|e| e.to_string())?;
        outputs.push(files);
    }
    ensure(outputs[0].keys().eq(outputs[1].keys()), || "file sets differ".into())?;
    let differing: Vec<&String> = outputs[0].iter().filter(|(k, v)| outputs[1][*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), || format!("differing outputs: {differing:?}"))?;
    Ok(format!("{} output files byte-identical across two runs", outputs[0].len()))
}

fn main() {
    let criteria = [
        Criterion {
            name: "sink-score oracle",
            budget: Some(Duration::from_secs(5)),
            check: sink_score_oracle,
        },
        Criterion {
            name: "planted detection",
            budget: Some(Duration::from_secs(120)),
            check: planted_detection,
        },
        Criterion {
            name: "monotonicity",
            budget: Some(Duration::from_secs(60)),
            check: monotonicity,
        },
        Criterion {
            name: "PCA probe asymmetry",
            budget: Some(Duration::from_secs(30)),
            check: pca_asymmetry,
        },
        Criterion {
            name: "swap suppression ordering",
            budget: Some(Duration::from_secs(60)),
            check: swap_ordering,
        },
        Criterion {
            name: "RoPE relative position",
            budget: Some(Duration::from_secs(5)),
            check: rope_relative,
        },
        Criterion {
            name: "trace format",
            budget: Some(Duration::from_secs(10)),
            check: format_round_trip,
        },
        Criterion {
            name: "pipeline determinism",
            budget: None,
            check: determinism,
        },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.check)();
        let elapsed = start.elapsed();
        let over = c.budget.filter(|b| elapsed > *b);
        let (status, detail) = match (&result, over) {
            (Ok(d), None) => ("PASS", d.clone()),
            (Ok(d), Some(b)) => ("FAIL", format!("{d}; took longer than {:.0} s", b.as_secs_f64())),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {} ({:.2} s): {detail}", c.name, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
