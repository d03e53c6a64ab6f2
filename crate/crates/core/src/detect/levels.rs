use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, SinkRun};

/// Runs sharing an `(l_start, lifetime)` pair up to the merge tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkLevel {
    /// Modal `(l_start, lifetime)` of the members.
    pub representative: (usize, usize),
    pub member_count: usize,
    /// Indices into the run list the levels were built from.
    pub members: Vec<usize>,
    pub member_positions: Vec<usize>,
}

fn within(a: (usize, usize), b: (usize, usize), cfg: &DetectorConfig) -> bool {
    a.0.abs_diff(b.0) <= cfg.level_merge_l_start && a.1.abs_diff(b.1) <= cfg.level_merge_lifetime
}

/// Greedy agglomerative grouping of runs into sink levels.
///
/// Pairs are visited by descending frequency (ties: smaller `l_start`, then
/// smaller lifetime); each joins the first existing level whose
/// representative is within tolerance, otherwise it founds a new level.
pub fn classify_levels(runs: &[SinkRun], cfg: &DetectorConfig) -> Vec<SinkLevel> {
    let mut by_pair: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        by_pair.entry((r.l_start, r.lifetime)).or_default().push(i);
    }
    let mut pairs: Vec<((usize, usize), Vec<usize>)> = by_pair.into_iter().collect();
    // BTreeMap order already breaks ties by (l_start, lifetime); the sort is stable.
    pairs.sort_by(|a, b| b.1.len().cmp(&a.1.len()));

    struct Group {
        founder: (usize, usize),
        pairs: Vec<((usize, usize), Vec<usize>)>,
    }
    let mut groups: Vec<Group> = Vec::new();
    for (pair, members) in pairs {
        match groups.iter_mut().find(|g| within(g.founder, pair, cfg)) {
            Some(g) => g.pairs.push((pair, members)),
            None => groups.push(Group {
                founder: pair,
                pairs: vec![(pair, members)],
            }),
        }
    }

    let mut levels: Vec<SinkLevel> = groups
        .into_iter()
        .map(|g| {
            let representative = g
                .pairs
                .iter()
                .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
                .map(|(p, _)| *p)
                .unwrap_or(g.founder);
            let mut members: Vec<usize> = g.pairs.into_iter().flat_map(|(_, m)| m).collect();
            members.sort_unstable();
            SinkLevel {
                representative,
                member_count: members.len(),
                member_positions: members.iter().map(|&i| runs[i].position).collect(),
                members,
            }
        })
        .collect();
    levels.sort_by(|a, b| {
        b.member_count
            .cmp(&a.member_count)
            .then(a.representative.cmp(&b.representative))
    });
    levels
}
