//! Coreset selection from influence rankings.
//!
//! "Top" proponents are the most negative influence values. The opponents are
//! the most positive ones and the minimum group holds the values closest to
//! zero. The random baseline is a seeded draw without replacement.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradient_store::GradientManifest;
use crate::influence::{influence_against_set, Hessian, InfluenceConfig, InfluenceRecord};
use crate::stats;

pub const DEFAULT_BINS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Proponents,
    Opponents,
    Minimum,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Proponents, Strategy::Opponents, Strategy::Minimum, Strategy::Random];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Proponents => "proponents",
            Strategy::Opponents => "opponents",
            Strategy::Minimum => "minimum",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoresetSize {
    /// In (0, 1]; the count is rounded down.
    Fraction(f64),
    Count(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetSpec {
    pub strategy: Strategy,
    pub size: CoresetSize,
    #[serde(default)]
    pub seed: u64,
}

impl CoresetSpec {
    pub fn fraction(strategy: Strategy, fraction: f64) -> Self {
        Self { strategy, size: CoresetSize::Fraction(fraction), seed: 0 }
    }

    pub fn count(strategy: Strategy, count: usize) -> Self {
        Self { strategy, size: CoresetSize::Count(count), seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Number of examples selected out of `n`.
    pub fn resolve(&self, n: usize) -> Result<usize> {
        let count = match self.size {
            CoresetSize::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidArgument(format!("fraction {f} outside (0, 1]")));
                }
                (f * n as f64).floor() as usize
            }
            CoresetSize::Count(c) => c,
        };
        if count == 0 {
            return Err(Error::InvalidArgument(format!("{:?} of {n} examples selects nothing", self.size)));
        }
        if count > n {
            return Err(Error::InvalidArgument(format!("count {count} exceeds {n} records")));
        }
        Ok(count)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub n: usize,
    pub min_influence: f64,
    pub max_influence: f64,
    pub mean: f64,
    pub median: f64,
    /// Omitted below three values.
    pub skewness: Option<f64>,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetResult {
    /// In selection order.
    pub selected_ids: Vec<String>,
    pub spec: CoresetSpec,
    /// Statistics of the full influence distribution the selection was drawn from.
    pub stats: DistributionStats,
}

impl CoresetResult {
    /// One id per line.
    pub fn write_id_list<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for id in &self.selected_ids {
            writeln!(w, "{id}")?;
        }
        Ok(())
    }
}

fn check_ranked(records: &[InfluenceRecord]) -> Result<Vec<&InfluenceRecord>> {
    let n = records.len();
    let mut by_rank: Vec<Option<&InfluenceRecord>> = vec![None; n];
    let mut ids = HashSet::with_capacity(n);
    for r in records {
        if !ids.insert(r.example_id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate example_id `{}`", r.example_id)));
        }
        if !r.influence.is_finite() {
            return Err(Error::NonFinite(format!("influence of `{}`", r.example_id)));
        }
        match by_rank.get_mut(r.rank.wrapping_sub(1)) {
            Some(slot @ None) => *slot = Some(r),
            _ => return Err(Error::UnrankedInput(format!("rank {} of `{}` is not part of a permutation of 1..={n}", r.rank, r.example_id))),
        }
    }
    let ordered: Vec<&InfluenceRecord> = by_rank.into_iter().map(Option::unwrap).collect();
    if let Some(w) = ordered.windows(2).find(|w| w[0].influence > w[1].influence) {
        return Err(Error::UnrankedInput(format!(
            "`{}` (rank {}) has larger influence than `{}` (rank {})",
            w[0].example_id, w[0].rank, w[1].example_id, w[1].rank
        )));
    }
    Ok(ordered)
}

pub fn select_coreset(records: &[InfluenceRecord], spec: &CoresetSpec) -> Result<CoresetResult> {
    select_coreset_with_bins(records, spec, DEFAULT_BINS)
}

pub fn select_coreset_with_bins(records: &[InfluenceRecord], spec: &CoresetSpec, bins: usize) -> Result<CoresetResult> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no influence records".into()));
    }
    let ordered = check_ranked(records)?;
    let count = spec.resolve(records.len())?;
    let picked: Vec<&InfluenceRecord> = match spec.strategy {
        Strategy::Proponents => ordered.iter().take(count).copied().collect(),
        Strategy::Opponents => ordered.iter().rev().take(count).copied().collect(),
        Strategy::Minimum => {
            let mut by_abs = ordered.clone();
            by_abs.sort_by(|a, b| a.influence.abs().total_cmp(&b.influence.abs()).then_with(|| a.example_id.cmp(&b.example_id)));
            by_abs.truncate(count);
            by_abs
        }
        Strategy::Random => {
            let mut by_id = ordered.clone();
            by_id.sort_by(|a, b| a.example_id.cmp(&b.example_id));
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            sample(&mut rng, by_id.len(), count).into_iter().map(|i| by_id[i]).collect()
        }
    };
    Ok(CoresetResult {
        selected_ids: picked.into_iter().map(|r| r.example_id.clone()).collect(),
        spec: spec.clone(),
        stats: distribution_stats_with_bins(records, bins)?,
    })
}

/// `|A ∩ B| / min(|A|, |B|)`.
pub fn overlap_coefficient<S: AsRef<str>>(a: &[S], b: &[S]) -> Result<f64> {
    let a: HashSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let b: HashSet<&str> = b.iter().map(AsRef::as_ref).collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("overlap coefficient of an empty set".into()));
    }
    Ok(a.intersection(&b).count() as f64 / a.len().min(b.len()) as f64)
}

pub fn distribution_stats(records: &[InfluenceRecord]) -> Result<DistributionStats> {
    distribution_stats_with_bins(records, DEFAULT_BINS)
}

pub fn distribution_stats_with_bins(records: &[InfluenceRecord], bins: usize) -> Result<DistributionStats> {
    if records.is_empty() {
        return Err(Error::EmptyInput("distribution of no records".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let xs: Vec<f64> = records.iter().map(|r| r.influence).collect();
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DistributionStats {
        n: xs.len(),
        min_influence: min,
        max_influence: max,
        mean: stats::mean(&xs),
        median: stats::median(&xs),
        skewness: stats::skewness(&xs),
        histogram: histogram(&xs, min, max, bins),
    })
}

fn histogram(xs: &[f64], min: f64, max: f64, bins: usize) -> Histogram {
    let width = (max - min) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { max } else { min + width * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for &x in xs {
        let i = if width > 0.0 { (((x - min) / width) as usize).min(bins - 1) } else { 0 };
        counts[i] += 1;
    }
    Histogram { edges, counts }
}

impl Histogram {
    /// `bin_start,bin_end,count`
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_start", "bin_end", "count"])?;
        for (i, c) in self.counts.iter().enumerate() {
            out.write_record([self.edges[i].to_string(), self.edges[i + 1].to_string(), c.to_string()])?;
        }
        out.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Equal-size comparison groups reported next to a proponents selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub opponents: Vec<String>,
    pub minimum: Vec<String>,
    pub overlap_minimum_opponents: f64,
    pub overlap_minimum_proponents: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct In2CoreRun {
    pub records: Vec<InfluenceRecord>,
    pub result: CoresetResult,
    pub comparison: Option<Comparison>,
}

/// Influence against the validation set, ranking, then selection.
pub fn run_in2core(
    train: &GradientManifest,
    val: &GradientManifest,
    cfg: &InfluenceConfig,
    hessian: Option<&Hessian>,
    spec: &CoresetSpec,
) -> Result<In2CoreRun> {
    let records = influence_against_set(train, val, cfg, hessian)?;
    let result = select_coreset(&records, spec)?;
    let comparison = if spec.strategy == Strategy::Proponents {
        let count = result.selected_ids.len();
        let opponents = select_coreset(&records, &CoresetSpec::count(Strategy::Opponents, count))?.selected_ids;
        let minimum = select_coreset(&records, &CoresetSpec::count(Strategy::Minimum, count))?.selected_ids;
        Some(Comparison {
            overlap_minimum_opponents: overlap_coefficient(&minimum, &opponents)?,
            overlap_minimum_proponents: overlap_coefficient(&minimum, &result.selected_ids)?,
            opponents,
            minimum,
        })
    } else {
        None
    };
    Ok(In2CoreRun { records, result, comparison })
}
