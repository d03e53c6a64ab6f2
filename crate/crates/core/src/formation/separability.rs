use super::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum ComparisonPolicy {
    /// Non-sink occurrences of the sinks' own token strings.
    Matched,
    /// A seeded sample of non-sink tokens, as many as the cohort.
    Random { seed: u64 },
}

impl Default for ComparisonPolicy {
    fn default() -> Self {
        ComparisonPolicy::Matched
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityPoint {
    pub layer: usize,
    pub site: Site,
    pub silhouette: f64,
    pub centroid_loo_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityCurve {
    pub policy: Option<ComparisonPolicy>,
    pub cohort: Vec<usize>,
    pub comparison: Vec<usize>,
    pub points: Vec<SeparabilityPoint>,
}

impl SeparabilityCurve {
    pub fn series(&self, site: Site) -> impl Iterator<Item = &SeparabilityPoint> {
        self.points.iter().filter(move |p| p.site == site)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean two-class silhouette coefficient under Euclidean distance. Points in
/// a singleton class score 0.
pub fn silhouette(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let n = a.len() + b.len();
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let score = |own: &[&[f64]], other: &[&[f64]]| -> f64 {
        own.iter()
            .enumerate()
            .map(|(i, x)| {
                if own.len() == 1 {
                    return 0.0;
                }
                let intra = own
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, y)| distance(x, y))
                    .sum::<f64>()
                    / (own.len() - 1) as f64;
                let inter = other.iter().map(|y| distance(x, y)).sum::<f64>() / other.len() as f64;
                let denom = intra.max(inter);
                if denom > 0.0 {
                    (inter - intra) / denom
                } else {
                    0.0
                }
            })
            .sum()
    };
    (score(a, b) + score(b, a)) / n as f64
}

/// Fraction of points that lie closer to their own class centroid, with the
/// point itself left out of that centroid, than to the other one.
pub fn loo_centroid_accuracy(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    if a.len() < 2 || b.len() < 2 {
        return 0.0;
    }
    let sum = |rows: &[&[f64]]| {
        let mut acc = vec![0.0; rows[0].len()];
        for r in rows {
            axpy(1.0, r, &mut acc);
        }
        acc
    };
    let correct = |own: &[&[f64]], other: &[&[f64]]| -> usize {
        let own_sum = sum(own);
        let other_centroid: Vec<f64> = sum(other).iter().map(|v| v / other.len() as f64).collect();
        own.iter()
            .filter(|x| {
                let loo: Vec<f64> = own_sum
                    .iter()
                    .zip(x.iter())
                    .map(|(s, v)| (s - v) / (own.len() - 1) as f64)
                    .collect();
                distance(x, &loo) < distance(x, &other_centroid)
            })
            .count()
    };
    (correct(a, b) + correct(b, a)) as f64 / (a.len() + b.len()) as f64
}

/// Separability of `cohort` from `comparison` at every layer in `layers` and
/// every captured site among hidden, attention output and MLP output.
pub fn separability<T: TraceAccess + ?Sized>(
    trace: &T,
    cohort: &[usize],
    comparison: &[usize],
    layers: std::ops::Range<usize>,
) -> Result<Vec<SeparabilityPoint>> {
    if cohort.len() < 3 || comparison.len() < 3 {
        return Err(Error::EmptyCohort(format!(
            "separability needs at least 3 positions per class, got {} and {}",
            cohort.len(),
            comparison.len()
        )));
    }
    trace.require(CaptureField::Hidden)?;
    let t_len = trace.meta().seq_len;
    if let Some(&p) = cohort.iter().chain(comparison).find(|&&p| p >= t_len) {
        return Err(Error::Index(format!("position {p} outside {t_len} tokens")));
    }
    if layers.end > trace.num_layers() {
        return Err(Error::Index(format!(
            "layer {} of a {}-layer trace",
            layers.end - 1,
            trace.num_layers()
        )));
    }
    let sites: Vec<(Site, CaptureField)> = [
        (Site::Hidden, CaptureField::Hidden),
        (Site::AttnOut, CaptureField::AttnOut),
        (Site::MlpOut, CaptureField::MlpOut),
    ]
    .into_iter()
    .filter(|(_, f)| trace.meta().has(*f))
    .collect();
    let mut points = Vec::new();
    for layer in layers {
        let rec = trace.layer(layer)?;
        for &(site, _) in &sites {
            let m = match site {
                Site::Hidden => rec.hidden()?,
                Site::AttnOut => rec.attn_out()?,
                Site::MlpOut => rec.mlp_out()?,
            };
            let a: Vec<&[f64]> = cohort.iter().map(|&p| m.row(p)).collect();
            let b: Vec<&[f64]> = comparison.iter().map(|&p| m.row(p)).collect();
            points.push(SeparabilityPoint {
                layer,
                site,
                silhouette: silhouette(&a, &b),
                centroid_loo_accuracy: loo_centroid_accuracy(&a, &b),
            });
        }
    }
    Ok(points)
}

/// Separability of the secondary sinks from a comparison set at every layer
/// before the earliest of them forms.
pub fn separability_by_layer<T: TraceAccess + ?Sized>(
    trace: &T,
    runs: &[SinkRun],
    policy: ComparisonPolicy,
) -> Result<SeparabilityCurve> {
    let cohort_runs: Vec<&SinkRun> = runs
        .iter()
        .filter(|r| r.class == SinkClass::Secondary && r.l_start > 0)
        .collect();
    let cohort: Vec<usize> = cohort_runs.iter().map(|r| r.position).collect();
    let first = cohort_runs.iter().map(|r| r.l_start).min().unwrap_or(0);
    let sinks: BTreeSet<usize> = runs.iter().map(|r| r.position).collect();
    let tokens = &trace.meta().tokens;
    let ordinary = (1..trace.meta().seq_len).filter(|p| !sinks.contains(p));
    let comparison: Vec<usize> = match policy {
        ComparisonPolicy::Matched => {
            let strings: BTreeSet<&str> = cohort.iter().map(|&p| tokens[p].as_str()).collect();
            ordinary.filter(|&p| strings.contains(tokens[p].as_str())).collect()
        }
        ComparisonPolicy::Random { seed } => {
            let pool: Vec<usize> = ordinary.collect();
            let n = cohort.len().max(3).min(pool.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
            picked.sort_unstable();
            picked
        }
    };
    let points = separability(trace, &cohort, &comparison, 0..first)?;
    Ok(SeparabilityCurve {
        policy: Some(policy),
        cohort,
        comparison,
        points,
    })
}
