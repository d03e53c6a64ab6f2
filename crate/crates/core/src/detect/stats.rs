use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{SinkClass, SinkRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionHistogram {
    /// Bin width as a fraction of the sequence length.
    pub bin_width: f64,
    pub counts: Vec<usize>,
    /// Counts normalised to sum to 1 (all zero when there are no sinks).
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenShare {
    pub token: String,
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkStatistics {
    pub seq_len: usize,
    pub secondary_count: usize,
    pub position_histogram: PositionHistogram,
    /// Sorted by descending share, then token.
    pub token_table: Vec<TokenShare>,
}

/// Position density (relative to `seq_len`) and token frequencies of the
/// secondary sinks in `runs`.
pub fn sink_statistics(runs: &[SinkRun], seq_len: usize, bin_width: f64) -> SinkStatistics {
    let bin_width = if bin_width > 0.0 && bin_width <= 1.0 { bin_width } else { 0.02 };
    let bins = (1.0 / bin_width).ceil() as usize;
    let secondary: Vec<&SinkRun> = runs.iter().filter(|r| r.class == SinkClass::Secondary).collect();

    let mut counts = vec![0usize; bins];
    for r in &secondary {
        let frac = r.position as f64 / seq_len.max(1) as f64;
        let b = ((frac / bin_width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = secondary.len();
    let density = counts
        .iter()
        .map(|&c| if n > 0 { c as f64 / n as f64 } else { 0.0 })
        .collect();

    let mut by_token: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &secondary {
        *by_token.entry(r.token.as_str()).or_default() += 1;
    }
    let mut token_table: Vec<TokenShare> = by_token
        .into_iter()
        .map(|(token, count)| TokenShare {
            token: token.to_string(),
            count,
            share: count as f64 / n as f64,
        })
        .collect();
    token_table.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.token.cmp(&b.token)));

    SinkStatistics {
        seq_len,
        secondary_count: n,
        position_histogram: PositionHistogram {
            bin_width,
            counts,
            density,
        },
        token_table,
    }
}
