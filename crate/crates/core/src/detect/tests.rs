use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::linalg::Matrix;
use crate::trace::{ActivationTrace, CaptureSet, LayerRecord};

fn det(layer: usize, positions: &[usize]) -> LayerDetection {
    LayerDetection {
        layer,
        positions: positions.to_vec(),
        norm_ratios: vec![10.0; positions.len()],
        median_norm: 1.0,
    }
}

fn meta(num_layers: usize, seq_len: usize, captured: &[CaptureField]) -> TraceMeta {
    TraceMeta {
        model_name: "fixture".into(),
        num_layers,
        hidden_size: 2,
        num_heads: 1,
        head_dim: 2,
        seq_len,
        rope_base: 1e4,
        tokens: (0..seq_len).map(|i| format!("t{i}")).collect(),
        captured: captured.iter().copied().collect::<CaptureSet>(),
        mlp_inner: None,
    }
}

/// Sets per layer: `sets[l]` lists sink positions.
fn layers_from_sets(sets: &[&[usize]]) -> Vec<LayerDetection> {
    sets.iter().enumerate().map(|(l, s)| det(l, s)).collect()
}

fn uniform_weights(t_len: usize) -> Matrix {
    let mut w = Matrix::zeros(t_len, t_len);
    for t in 0..t_len {
        for k in 0..=t {
            w[(t, k)] = 1.0 / (t + 1) as f64;
        }
    }
    w
}

fn attn_trace(heads: Vec<Vec<Matrix>>) -> ActivationTrace {
    let t_len = heads[0][0].rows();
    let mut m = meta(heads.len(), t_len, &[CaptureField::AttnWeights]);
    m.num_heads = heads[0].len();
    m.hidden_size = 2 * m.num_heads;
    ActivationTrace {
        meta: m,
        layers: heads
            .into_iter()
            .map(|h| LayerRecord {
                attn_weights: Some(h),
                ..Default::default()
            })
            .collect(),
    }
}

#[test]
fn norm_gate_rejects_aligned_but_typical_token() {
    // Position 2 is parallel to BOS but has exactly the median norm.
    let hidden = Matrix::from_rows(&[[30.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [10.0, 0.1]]).unwrap();
    let d = detect_layer(0, &hidden, &DetectorConfig::default()).unwrap();
    assert_eq!(d.median_norm, 1.0);
    assert_eq!(d.positions, vec![0, 5]);
    assert_abs_diff_eq!(d.norm_ratios[0], 30.0);
}

#[test]
fn bos_needs_only_norm_gate() {
    let hidden = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
    assert!(detect_layer(0, &hidden, &DetectorConfig::default()).unwrap().positions.is_empty());
    let single = Matrix::from_rows(&[[100.0, 0.0]]).unwrap();
    assert!(detect_layer(0, &single, &DetectorConfig::default()).unwrap().positions.is_empty());
}

#[test]
fn detection_is_scale_invariant() {
    let hidden = Matrix::from_rows(&[[40.0, 1.0], [0.3, 1.0], [39.0, 2.0], [0.5, -1.0], [1.0, 1.0], [-20.0, 0.0]]).unwrap();
    let cfg = DetectorConfig::default();
    let base = detect_layer(0, &hidden, &cfg).unwrap();
    for s in [1e-3, 0.5, 7.0, 1e4] {
        let mut scaled = hidden.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= s);
        assert_eq!(detect_layer(0, &scaled, &cfg).unwrap().positions, base.positions);
    }
}

#[test]
fn missing_hidden_is_reported() {
    let trace = attn_trace(vec![vec![uniform_weights(3)]]);
    assert!(matches!(
        detect_sinks_per_layer(&trace, &DetectorConfig::default()),
        Err(Error::MissingField("hidden"))
    ));
}

#[test]
fn bos_and_mid_network_runs_classified() {
    let l = 40;
    let sets: Vec<Vec<usize>> = (0..l)
        .map(|layer| {
            let mut s = Vec::new();
            if layer >= 2 {
                s.push(0);
            }
            if (22..=33).contains(&layer) {
                s.push(17);
            }
            s
        })
        .collect();
    let per_layer: Vec<LayerDetection> = sets.iter().enumerate().map(|(i, s)| det(i, s)).collect();
    let ex = extract_sink_runs(&per_layer, &meta(l, 20, &[]), &DetectorConfig::default());
    assert_eq!(ex.bos_l_start, Some(2));
    let classes: Vec<_> = ex.runs.iter().map(|r| (r.position, r.class, r.lifetime)).collect();
    assert_eq!(
        classes,
        vec![(0, SinkClass::Primary, l - 2), (17, SinkClass::Secondary, 12)]
    );
    assert!(ex.runs[0].reaches_end);
    assert!(!ex.runs[1].reaches_end);
}

#[test]
fn template_token_alongside_bos_is_primary() {
    let per_layer = layers_from_sets(&[&[], &[0, 1], &[0, 1], &[0, 1], &[0, 1]]);
    let ex = extract_sink_runs(&per_layer, &meta(5, 4, &[]), &DetectorConfig::default());
    assert!(ex.runs.iter().all(|r| r.class == SinkClass::Primary));
    assert_eq!(ex.runs.len(), 2);
}

#[test]
fn single_layer_flicker_discarded() {
    let mut sets: Vec<&[usize]> = vec![&[0]; 12];
    sets[10] = &[0, 5];
    let ex = extract_sink_runs(&layers_from_sets(&sets), &meta(12, 8, &[]), &DetectorConfig::default());
    assert_eq!(ex.runs.len(), 1);
    assert_eq!(ex.runs[0].position, 0);
}

#[test]
fn first_run_wins_after_lapse() {
    // Position 3: layers 2-4, lapse at 5, again 6-9.
    let sets: Vec<&[usize]> = vec![&[0], &[0], &[0, 3], &[0, 3], &[0, 3], &[0], &[0, 3], &[0, 3], &[0, 3], &[0, 3]];
    let ex = extract_sink_runs(&layers_from_sets(&sets), &meta(10, 8, &[]), &DetectorConfig::default());
    let r = ex.runs.iter().find(|r| r.position == 3).unwrap();
    assert_eq!((r.l_start, r.lifetime, r.reaches_end), (2, 3, false));
}

#[test]
fn missing_bos_warns_and_marks_secondary() {
    let sets: Vec<&[usize]> = vec![&[], &[4], &[4], &[4]];
    let ex = extract_sink_runs(&layers_from_sets(&sets), &meta(4, 8, &[]), &DetectorConfig::default());
    assert_eq!(ex.bos_l_start, None);
    assert!(ex.warnings.iter().any(|w| w.contains("BosNotDetected")));
    assert_eq!(ex.runs[0].class, SinkClass::Secondary);
}

fn run(position: usize, l_start: usize, lifetime: usize) -> SinkRun {
    SinkRun {
        position,
        l_start,
        lifetime,
        reaches_end: false,
        peak_norm_ratio: 10.0,
        class: SinkClass::Secondary,
        token: " ".into(),
    }
}

#[test]
fn levels_merge_within_tolerance() {
    let mut runs = Vec::new();
    runs.extend((0..10).map(|i| run(i, 5, 4)));
    runs.push(run(10, 5, 5));
    runs.extend((11..17).map(|i| run(i, 9, 12)));
    let levels = classify_levels(&runs, &DetectorConfig::default());
    let summary: Vec<_> = levels.iter().map(|l| (l.representative, l.member_count)).collect();
    assert_eq!(summary, vec![((5, 4), 11), ((9, 12), 6)]);
}

#[test]
fn levels_identical_and_boundary() {
    let same: Vec<_> = (0..4).map(|i| run(i, 3, 3)).collect();
    assert_eq!(classify_levels(&same, &DetectorConfig::default()).len(), 1);
    let apart = vec![run(0, 5, 4), run(1, 7, 4)];
    assert_eq!(classify_levels(&apart, &DetectorConfig::default()).len(), 2);
    assert!(classify_levels(&[], &DetectorConfig::default()).is_empty());
}

#[test]
fn sink_score_examples() {
    let single = attn_trace(vec![vec![Matrix::from_rows(&[[1.0]]).unwrap()]]);
    assert_eq!(sink_score(&single, 0, 0, HeadSelection::All).unwrap(), 1.0);

    let uniform = attn_trace(vec![vec![uniform_weights(4)]]);
    assert_abs_diff_eq!(
        sink_score(&uniform, 1, 0, HeadSelection::All).unwrap(),
        13.0 / 36.0,
        epsilon = 1e-15
    );
    assert_abs_diff_eq!(
        sink_score(&uniform, 3, 0, HeadSelection::Head(0)).unwrap(),
        uniform.layers[0].attn_weights.as_ref().unwrap()[0][(3, 3)]
    );
    assert_abs_diff_eq!(
        sink_score(&uniform, 0, 0, HeadSelection::All).unwrap(),
        (1.0 + 0.5 + 1.0 / 3.0 + 0.25) / 4.0,
        epsilon = 1e-15
    );
    assert!(matches!(sink_score(&uniform, 4, 0, HeadSelection::All), Err(Error::Index(_))));
}

#[test]
fn score_requires_attention() {
    let trace = ActivationTrace {
        meta: meta(1, 2, &[CaptureField::Hidden]),
        layers: vec![LayerRecord {
            hidden: Some(Matrix::zeros(2, 2)),
            ..Default::default()
        }],
    };
    assert!(matches!(
        sink_score(&trace, 0, 0, HeadSelection::All),
        Err(Error::MissingField("attn_weights"))
    ));
}

#[test]
fn head_average_over_exactly_h_heads() {
    let mut a = uniform_weights(3);
    a[(1, 0)] = 1.0;
    a[(1, 1)] = 0.0;
    let b = uniform_weights(3);
    let trace = attn_trace(vec![vec![a.clone(), b.clone()]]);
    let want = (score::head_score(&a, 0) + score::head_score(&b, 0)) / 2.0;
    assert_abs_diff_eq!(sink_score(&trace, 0, 0, HeadSelection::All).unwrap(), want);
}

fn random_attention(t_len: usize, seed: &[f64]) -> Matrix {
    let mut w = Matrix::zeros(t_len, t_len);
    for t in 0..t_len {
        let row: Vec<f64> = (0..=t).map(|k| seed[(t * 7 + k * 3) % seed.len()] + 1e-3).collect();
        let z: f64 = row.iter().sum();
        for (k, v) in row.into_iter().enumerate() {
            w[(t, k)] = v / z;
        }
    }
    w
}

proptest! {
    #[test]
    fn attention_mass_identity(t_len in 1usize..24, heads in 1usize..4, seed in prop::collection::vec(0.0f64..1.0, 32)) {
        let hs: Vec<Matrix> = (0..heads).map(|h| random_attention(t_len, &seed[h..])).collect();
        let trace = attn_trace(vec![hs]);
        for h in 0..heads {
            let mass: f64 = (0..t_len)
                .map(|k| (t_len - k) as f64 * sink_score(&trace, k, 0, HeadSelection::Head(h)).unwrap())
                .sum();
            prop_assert!((mass - t_len as f64).abs() <= 1e-9);
        }
        let table = sink_score_table(&trace, &(0..t_len).collect::<Vec<_>>()).unwrap();
        for k in 0..t_len {
            let s = table.score(0, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn streaming_matches_batch(sets in prop::collection::vec(prop::collection::btree_set(0usize..6, 0..6), 1..16)) {
        let per_layer: Vec<LayerDetection> = sets
            .iter()
            .enumerate()
            .map(|(l, s)| det(l, &s.iter().copied().collect::<Vec<_>>()))
            .collect();
        let m = meta(per_layer.len(), 6, &[]);
        let cfg = DetectorConfig::default();
        let batch = extract_sink_runs(&per_layer, &m, &cfg);
        let mut tracker = RunTracker::new(cfg);
        for d in &per_layer {
            tracker.push(d).unwrap();
        }
        prop_assert_eq!(tracker.finish(&m), batch);
    }
}

#[test]
fn statistics_count_secondary_tokens() {
    let mut runs = vec![run(10, 5, 4), run(10, 5, 4), run(500, 5, 4)];
    runs[2].token = "1".into();
    let mut primary = run(0, 1, 30);
    primary.class = SinkClass::Primary;
    runs.push(primary);
    let s = sink_statistics(&runs, 1000, 0.02);
    assert_eq!(s.secondary_count, 3);
    assert_eq!(s.token_table.len(), 2);
    assert_eq!(s.token_table[0].token, " ");
    assert_abs_diff_eq!(s.token_table[0].share, 2.0 / 3.0);
    assert_abs_diff_eq!(s.token_table[1].share, 1.0 / 3.0);
    assert_eq!(s.position_histogram.counts.len(), 50);
    assert_eq!(s.position_histogram.counts[0], 2);
    assert_eq!(s.position_histogram.counts[25], 1);

    let empty = sink_statistics(&[], 100, 0.02);
    assert!(empty.token_table.is_empty());
    assert!(empty.position_histogram.density.iter().all(|&d| d == 0.0));
}
