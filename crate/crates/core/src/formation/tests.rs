use super::*;
use crate::detect::{detect_runs, RunExtraction};
use crate::linalg::dot;
use crate::synth::{
    generate_scenario, null_scenario, pca_scenario, staged_scenario, PlantSpec, Scenario, ScenarioConfig,
};
use crate::trace::{default_capture, ActivationTrace};

fn baseline(sc: &Scenario) -> (ActivationTrace, RunExtraction) {
    let trace = sc.trace(&default_capture()).unwrap();
    let runs = detect_runs(&trace, &DetectorConfig::default()).unwrap();
    (trace, runs)
}

fn plant(positions: &[usize], lifetime: Option<usize>) -> Scenario {
    generate_scenario(&ScenarioConfig {
        plants: vec![PlantSpec::new(5, lifetime, 40.0, positions)],
        ..ScenarioConfig::default()
    })
    .unwrap()
}

#[test]
fn silhouette_matches_hand_computation() {
    let (a, b) = ([[0.0], [1.0]], [[10.0], [11.0]]);
    let a: Vec<&[f64]> = a.iter().map(|r| r.as_slice()).collect();
    let b: Vec<&[f64]> = b.iter().map(|r| r.as_slice()).collect();
    let want = (2.0 * (9.5 / 10.5) + 2.0 * (8.5 / 9.5)) / 4.0;
    assert!((silhouette(&a, &b) - want).abs() < 1e-12);
    assert!((silhouette(&a, &a) - 0.0).abs() < 1e-12 || silhouette(&a, &a) < 0.0);
}

#[test]
fn loo_centroid_accuracy_extremes() {
    let rows = |v: &[f64]| v.iter().map(|x| vec![*x]).collect::<Vec<_>>();
    let (a, b) = (rows(&[0.0, 1.0, 2.0]), rows(&[10.0, 11.0, 12.0]));
    fn refs(m: &[Vec<f64>]) -> Vec<&[f64]> {
        m.iter().map(|r| r.as_slice()).collect()
    }
    assert_eq!(loo_centroid_accuracy(&refs(&a), &refs(&b)), 1.0);
    // Each point's leave-one-out centroid is the other point of its class,
    // which is never strictly closer than the opposite centroid.
    let (a, b) = (rows(&[0.0, 2.0]), rows(&[1.0, 3.0]));
    assert_eq!(loo_centroid_accuracy(&refs(&a), &refs(&b)), 0.0);
}

#[test]
fn cosine_rises_through_the_mlp_for_planted_sinks() {
    let sc = plant(&[7, 19, 44, 70, 101], None);
    let (_, runs) = baseline(&sc);
    let ct = mlp_cosine_trace(&sc.model, &sc.tokens, &runs.runs, 6).unwrap();
    assert_eq!(ct.mlp_layer, 5);
    assert_eq!(ct.positions, vec![7, 19, 44, 70, 101]);
    assert!(ct.median(MlpStage::Input) <= 0.3, "{:?}", ct.summary);
    assert!(ct.median(MlpStage::Output) >= 0.95, "{:?}", ct.summary);
    let medians: Vec<f64> = MlpStage::ALL[..4].iter().map(|&s| ct.median(s)).collect();
    let inversions = medians.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(inversions <= 1, "{medians:?}");
    for row in &ct.per_token {
        assert!(row.iter().all(|c| (-1.0..=1.0).contains(c)));
    }
    for s in &ct.summary {
        assert!(s.q1 <= s.median && s.median <= s.q3);
    }

    let control = stage_cosines(&sc.model, &sc.tokens, &[3, 12, 30, 55, 88], 5, 0).unwrap();
    assert!(control.median(MlpStage::Output) <= 0.3, "{:?}", control.summary);
}

#[test]
fn cosine_trace_guards() {
    let sc = plant(&[7, 19], None);
    let (_, runs) = baseline(&sc);
    assert!(matches!(
        mlp_cosine_trace(&sc.model, &sc.tokens, &runs.runs, 9),
        Err(Error::EmptyCohort(_))
    ));
    assert!(matches!(
        stage_cosines(&sc.model, &sc.tokens, &[7, 19], 5, 7),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        mlp_cosine_trace(&sc.model, &sc.tokens, &runs.runs, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn probe_is_sign_asymmetric_along_trigger_components() {
    let sc = generate_scenario(&pca_scenario(0)).unwrap();
    let truth = &sc.truth.plants[0];
    let x = cohort_mlp_inputs(&sc.model, &sc.tokens, &truth.positions, truth.amplifier_layer).unwrap();
    let res = pca_probe(
        &sc.model,
        truth.amplifier_layer,
        &x,
        &sc.truth.sink_direction,
        &ProbeConfig::default(),
    )
    .unwrap();
    assert!(res.explained_variance_ratio.iter().sum::<f64>() >= 0.95);
    let norms: Vec<f64> = x.row_iter().map(norm).collect();
    assert_eq!(res.alpha, median(&norms).unwrap());
    for i in 0..3 {
        let aligned = res.entries[2 * i..2 * i + 2].iter().filter(|e| e.cos_to_sink >= 0.99).count();
        let dom = res.dominant(i).unwrap();
        assert!(dom.cos_to_sink >= 0.99, "pc {i}: {dom:?}");
        assert!(res.sign_ratio(i).unwrap() >= 10.0, "pc {i}: {:?}", res.entries);
        assert!(aligned >= 1);
    }
}

#[test]
fn rank_one_cohort_probes_along_the_sink() {
    let sc = plant(&[7], None);
    let v = &sc.truth.plants[0].triggers[0];
    let base = sc.model.embedding.row(3).to_vec();
    let rows: Vec<Vec<f64>> = (1..=6)
        .map(|i| base.iter().zip(v).map(|(b, e)| b + i as f64 * e).collect())
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let cfg = ProbeConfig {
        k: 1,
        alpha: Some(5.0),
        ..ProbeConfig::default()
    };
    let res = pca_probe(&sc.model, 5, &x, &sc.truth.sink_direction, &cfg).unwrap();
    assert!((res.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
    assert!(dot(res.components.row(0), v).abs() > 1.0 - 1e-9);
    assert!(res.dominant(0).unwrap().cos_to_sink >= 0.99);
}

#[test]
fn probing_a_background_layer_gives_ordinary_outputs() {
    let sc = plant(&[7], None);
    let layer = 2;
    let fillers: Vec<usize> = (1..sc.tokens.len()).filter(|&p| p != 7).collect();
    let x = cohort_mlp_inputs(&sc.model, &sc.tokens, &fillers, layer).unwrap();
    let res = pca_probe(&sc.model, layer, &x, &sc.truth.sink_direction, &ProbeConfig::default()).unwrap();
    let typical: Vec<f64> = x
        .row_iter()
        .map(|r| norm(&mlp_probe(&sc.model, layer, r, false).unwrap().output))
        .collect();
    let typical = median(&typical).unwrap();
    for e in &res.entries {
        assert!(e.cos_to_sink.abs() <= 0.5, "{e:?}");
        assert!(e.output_norm <= 3.0 * typical && e.output_norm >= typical / 3.0, "{e:?} vs {typical}");
    }
}

#[test]
fn probe_rejects_bad_alpha_and_rank() {
    let sc = plant(&[7], None);
    let x = cohort_mlp_inputs(&sc.model, &sc.tokens, &[1, 2], 5).unwrap();
    let d = &sc.truth.sink_direction;
    let bad = ProbeConfig {
        alpha: Some(0.0),
        ..ProbeConfig::default()
    };
    assert!(matches!(pca_probe(&sc.model, 5, &x, d, &bad), Err(Error::Config(_))));
    assert!(matches!(
        pca_probe(&sc.model, 5, &x, d, &ProbeConfig::default()),
        Err(Error::Rank { .. })
    ));
}

#[test]
fn embedding_triggers_are_separable_from_the_start() {
    let sc = plant(&[7, 19, 44, 70, 101], None);
    let (trace, runs) = baseline(&sc);
    let curve = separability_by_layer(&trace, &runs.runs, ComparisonPolicy::Random { seed: 3 }).unwrap();
    assert_eq!(curve.series(Site::Hidden).count(), 6);
    for p in curve.series(Site::Hidden) {
        assert!(p.centroid_loo_accuracy >= 0.95, "{p:?}");
        assert!((-1.0..=1.0).contains(&p.silhouette));
    }
    assert!(matches!(
        separability_by_layer(&trace, &runs.runs, ComparisonPolicy::Matched),
        Err(Error::EmptyCohort(_))
    ));
}

#[test]
fn random_split_of_ordinary_tokens_is_not_separable() {
    let accs: Vec<f64> = (0..5)
        .map(|seed| {
            let sc = generate_scenario(&null_scenario(seed, true)).unwrap();
            let trace = sc.trace(&default_capture()).unwrap();
            let pool: Vec<usize> = (1..sc.tokens.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picked: Vec<usize> = sample(&mut rng, pool.len(), 60).into_iter().map(|i| pool[i]).collect();
            let pts = separability(&trace, &picked[..30], &picked[30..], 0..8).unwrap();
            pts.iter().map(|p| p.centroid_loo_accuracy).sum::<f64>() / pts.len() as f64
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.15, "{accs:?}");
}

#[test]
fn staged_triggers_separate_progressively() {
    for seed in 0..3 {
        let sc = generate_scenario(&staged_scenario(seed)).unwrap();
        let (trace, runs) = baseline(&sc);
        let matched = separability_by_layer(&trace, &runs.runs, ComparisonPolicy::Matched).unwrap();
        let acc: Vec<f64> = matched.series(Site::Hidden).map(|p| p.centroid_loo_accuracy).collect();
        assert_eq!(acc.len(), 9);
        for w in acc.windows(2) {
            assert!(w[1] >= w[0] - 0.1, "seed {seed}: {acc:?}");
        }
        assert!(acc[8] > acc[0] + 0.3, "seed {seed}: {acc:?}");

        let random = separability_by_layer(&trace, &runs.runs, ComparisonPolicy::Random { seed }).unwrap();
        let mean = |c: &SeparabilityCurve| {
            let v: Vec<f64> = c.series(Site::Hidden).map(|p| p.silhouette).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(&matched) <= mean(&random), "seed {seed}");
    }
}

#[test]
fn separability_needs_three_per_class() {
    let sc = plant(&[7, 19], None);
    let (trace, runs) = baseline(&sc);
    assert!(matches!(
        separability_by_layer(&trace, &runs.runs, ComparisonPolicy::Random { seed: 0 }),
        Err(Error::EmptyCohort(_))
    ));
}

#[test]
fn swapping_before_the_amplifier_suppresses() {
    let sc = plant(&[7, 19, 44], None);
    let (_, runs) = baseline(&sc);
    let report = swap_experiment(
        &sc.model,
        &sc.tokens,
        &runs.runs,
        &[0, 5, 8],
        &Site::ALL,
        &DetectorConfig::default(),
    )
    .unwrap();
    assert_eq!(report.outcomes.len(), 3 * 3 * 3);
    assert_eq!(report.rate(5, Site::Hidden), Some(1.0));
    assert_eq!(report.rate(0, Site::Hidden), Some(1.0));
    // After the amplifier the sink lives in the residual stream; replacing
    // one module's contribution leaves it in place.
    assert_eq!(report.rate(8, Site::AttnOut), Some(0.0));
    assert_eq!(report.rate(8, Site::MlpOut), Some(0.0));
    // Replacing the whole residual removes it.
    assert_eq!(report.rate(8, Site::Hidden), Some(1.0));
    for r in &report.rates {
        assert_eq!(r.suppression_rate, r.suppressed as f64 / r.trials as f64);
    }
}

#[test]
fn staged_swaps_grow_more_effective_with_depth() {
    let sc = generate_scenario(&staged_scenario(0)).unwrap();
    let (_, runs) = baseline(&sc);
    let l_start = runs.secondary().map(|r| r.l_start).min().unwrap();
    let layers: Vec<usize> = (0..=l_start).collect();
    let report = swap_experiment(
        &sc.model,
        &sc.tokens,
        &runs.runs,
        &layers,
        &[Site::Hidden],
        &DetectorConfig::default(),
    )
    .unwrap();
    let rates: Vec<f64> = layers.iter().map(|&l| report.rate(l, Site::Hidden).unwrap()).collect();
    assert!(rates.windows(2).all(|w| w[1] >= w[0]), "{rates:?}");
    assert!(rates[0] < 1.0, "{rates:?}");
    assert_eq!(rates[l_start - 1], 1.0);
    assert_eq!(rates[l_start], 1.0);
    // Staged sinks are re-derived from their cue when swapped before the copy.
    let staged: Vec<usize> = sc
        .truth
        .plants
        .iter()
        .filter(|p| p.copy_layer.is_some())
        .flat_map(|p| p.positions.clone())
        .collect();
    for o in report.outcomes.iter().filter(|o| o.swap_layer == 0) {
        assert_eq!(o.suppressed, !staged.contains(&o.position), "{o:?}");
    }
}

#[test]
fn swap_guards() {
    let sc = generate_scenario(&null_scenario(0, true)).unwrap();
    let (_, runs) = baseline(&sc);
    assert!(matches!(
        swap_experiment(&sc.model, &sc.tokens, &runs.runs, &[1], &[Site::Hidden], &DetectorConfig::default()),
        Err(Error::EmptyCohort(_))
    ));
    let sc = plant(&[7], None);
    let (_, runs) = baseline(&sc);
    assert!(matches!(
        swap_experiment(&sc.model, &sc.tokens, &runs.runs, &[15], &[Site::Hidden], &DetectorConfig::default()),
        Err(Error::Index(_))
    ));
}
