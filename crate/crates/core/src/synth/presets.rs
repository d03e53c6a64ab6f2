//! Ready-made scenario families used by the tests, the acceptance suite and
//! the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BosDip, BosPlant, PlantSpec, ScenarioConfig};

/// Smallest gain, per hidden size, at which planted runs are recovered
/// exactly with default detector settings. Measured by the `g_min` sweep in
/// the synth tests; gains used elsewhere stay at least 2× above.
pub const G_MIN_TABLE: &[(usize, f64)] = &[(32, 1.5), (64, 1.0), (128, 0.75)];

/// Tabulated g_min for the largest listed width not above `hidden_size`
/// (g_min falls with width, so this errs high in between).
pub fn g_min(hidden_size: usize) -> f64 {
    G_MIN_TABLE
        .iter()
        .rev()
        .find(|(h, _)| *h <= hidden_size)
        .unwrap_or(&G_MIN_TABLE[0])
        .1
}

pub fn null_scenario(seed: u64, with_bos: bool) -> ScenarioConfig {
    ScenarioConfig {
        name: "null".into(),
        seed,
        bos: with_bos.then(BosPlant::default),
        ..ScenarioConfig::default()
    }
}

/// Random dimensions and one to three plants with distinct positions.
pub fn detection_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1ab5);
    let num_layers = rng.random_range(10..=32);
    let hidden_size = [32, 64, 64, 128][rng.random_range(0..4)];
    let seq_len = [64, 128, 128, 256, 512][rng.random_range(0..5)];
    let bos_layer = rng.random_range(0..=1);
    let mut free: Vec<usize> = (2..seq_len).collect();
    let mut plants = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        // Keep detected l_start at least two layers after BOS so the run is
        // secondary even when it reaches the last layer.
        let l_start = rng.random_range(bos_layer + 2..=num_layers - 3);
        let lifetime = if rng.random_bool(0.25) {
            None
        } else {
            Some(rng.random_range(2..=num_layers - 1 - l_start))
        };
        let gain = 2.0 * g_min(hidden_size) * 10f64.powf(rng.random_range(0.0..2.0));
        let positions: Vec<usize> = (0..rng.random_range(1..=4))
            .map(|_| free.swap_remove(rng.random_range(0..free.len())))
            .collect();
        plants.push(PlantSpec::new(l_start, lifetime, gain, &positions));
    }
    ScenarioConfig {
        name: format!("detection-{seed}"),
        seed,
        num_layers,
        hidden_size,
        seq_len,
        bos: Some(BosPlant {
            layer: bos_layer,
            ..BosPlant::default()
        }),
        plants,
        ..ScenarioConfig::default()
    }
}

/// One scenario per gain: a single never-suppressed sink at position 40.
pub fn gain_grid(seed: u64, gains: &[f64]) -> Vec<ScenarioConfig> {
    gains
        .iter()
        .map(|&g| ScenarioConfig {
            name: format!("gain-{g}"),
            seed,
            plants: vec![PlantSpec::new(4, None, g, &[40])],
            ..ScenarioConfig::default()
        })
        .collect()
}

/// One scenario per `(gain, lifetime)` pair, same layout as [`gain_grid`].
pub fn gain_lifetime_grid(seed: u64, pairs: &[(f64, usize)]) -> Vec<ScenarioConfig> {
    pairs
        .iter()
        .map(|&(g, lt)| ScenarioConfig {
            name: format!("gain-{g}-lifetime-{lt}"),
            seed,
            num_layers: 20,
            plants: vec![PlantSpec::new(4, Some(lt), g, &[40])],
            ..ScenarioConfig::default()
        })
        .collect()
}

/// Three triggers mixed in every trigger token with factorial magnitudes, so
/// the trigger directions carry clearly separated variances.
pub fn pca_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9ca);
    let seq_len = 512;
    let mut free: Vec<usize> = (1..seq_len).collect();
    let positions: Vec<(usize, usize)> = (0..128)
        .map(|i| (free.swap_remove(rng.random_range(0..free.len())), i))
        .collect();
    ScenarioConfig {
        name: "pca".into(),
        seed,
        seq_len,
        plants: vec![PlantSpec {
            num_triggers: 3,
            mixed_triggers: true,
            magnitude_spread: 0.6,
            trigger_positions: positions,
            token: Some("1".into()),
            ..PlantSpec::new(6, None, 10.0, &[])
        }],
        ..ScenarioConfig::default()
    }
}

/// Sinks sharing one trigger that arrives at different depths: from the
/// embedding, and through previous-token heads at layers 2, 4 and 6. All
/// amplify at layer 8. The larger content scale keeps the keys of averaged
/// tokens close to ordinary ones, which the previous-token heads need when
/// activations are swapped.
pub fn staged_scenario(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57a6);
    let seq_len = 128;
    // Staged positions need a free slot before them for the cue.
    let mut slots: Vec<usize> = (1..seq_len / 4).map(|i| 4 * i + 2).collect();
    let mut pick = |n: usize| -> Vec<usize> {
        (0..n)
            .map(|_| slots.swap_remove(rng.random_range(0..slots.len())))
            .collect()
    };
    let mut plants = vec![PlantSpec {
        token: Some("1".into()),
        ..PlantSpec::new(8, None, 10.0, &pick(2))
    }];
    for copy_layer in [2, 4, 6] {
        plants.push(PlantSpec {
            copy_layer: Some(copy_layer),
            trigger_from: Some(0),
            ..PlantSpec::new(8, None, 10.0, &pick(2))
        });
    }
    ScenarioConfig {
        name: "staged".into(),
        seed,
        seq_len,
        content_scale: 1.5,
        plants,
        ..ScenarioConfig::default()
    }
}

/// BOS sink partially removed at layer 7 and restored two layers later,
/// with secondary sinks living exactly in that window.
pub fn valley_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: "valley".into(),
        seed,
        bos: Some(BosPlant {
            dip: Some(BosDip {
                layer: 7,
                fraction: 0.9,
                width: 2,
            }),
            ..BosPlant::default()
        }),
        plants: vec![PlantSpec::new(7, Some(2), 10.0, &[30, 61, 95])],
        ..ScenarioConfig::default()
    }
}
