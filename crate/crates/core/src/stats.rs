//! Analysis statistics: answer distributions, Pearson correlation against
//! base rates, Fisher-z pooling, the Wilcoxon signed-rank statistic,
//! accuracy, correctness flow and label entropy.
//!
//! The numeric kernels are generic over [`num_traits::Float`]; the record
//! level helpers work on `f64` probabilities as stored on disk.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::label::{ChoiceLabel, LabelMap};
use crate::selection::SelectionResult;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input is empty")]
    Empty,
    #[error("correlation {0} lies outside [-1, 1]")]
    InvalidCorrelation(String),
    #[error("result sets cover different keys: {only_in_baseline} only in baseline, {only_in_comparison} only in comparison")]
    KeyMismatch {
        only_in_baseline: usize,
        only_in_comparison: usize,
        examples: Vec<String>,
    },
}

/// Pearson correlation, or a flag when either input has zero variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation<F> {
    Value(F),
    Degenerate,
}

impl<F: Copy> Correlation<F> {
    pub fn value(&self) -> Option<F> {
        match self {
            Correlation::Value(r) => Some(*r),
            Correlation::Degenerate => None,
        }
    }
}

/// Sample Pearson correlation of two equally long series.
pub fn pearson_r<F: Float>(x: &[F], y: &[F]) -> Result<Correlation<F>, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = F::from(x.len()).expect("length fits the float type");
    let mean = |v: &[F]| v.iter().fold(F::zero(), |acc, &a| acc + a) / n;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (F::zero(), F::zero(), F::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == F::zero() || syy == F::zero() {
        return Ok(Correlation::Degenerate);
    }
    let r = sxy / (sxx * syy).sqrt();
    Ok(Correlation::Value(r.max(-F::one()).min(F::one())))
}

/// Fisher-z pooled correlation over a set of per-group correlations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats<F> {
    pub mean_z: F,
    pub combined_r: F,
    pub r_squared: F,
    pub n: usize,
    /// Inputs pulled in from |r| = 1 before the transform.
    pub clamped: usize,
}

/// Largest |r| passed to `atanh`: `1 - 1e-12`, or one ulp-scale step below
/// one for types too coarse to hold that.
pub fn clamp_limit<F: Float>() -> F {
    let gap = F::from(1e-12).expect("representable").max(F::epsilon());
    F::one() - gap
}

pub fn fisher_aggregate<F: Float>(rs: &[F]) -> Result<AggregateStats<F>, StatsError> {
    if rs.is_empty() {
        return Err(StatsError::Empty);
    }
    let limit = clamp_limit::<F>();
    let mut clamped = 0;
    let mut sum_z = F::zero();
    for &r in rs {
        if r.is_nan() || r.abs() > F::one() {
            return Err(StatsError::InvalidCorrelation(format!("{:?}", r.to_f64())));
        }
        let r = if r.abs() > limit {
            clamped += 1;
            limit.copysign(r)
        } else {
            r
        };
        sum_z = sum_z + r.atanh();
    }
    if clamped > 0 {
        tracing::warn!(clamped, "perfect correlations clamped before Fisher z");
    }
    let mean_z = sum_z / F::from(rs.len()).expect("length fits the float type");
    let combined_r = mean_z.tanh();
    Ok(AggregateStats {
        mean_z,
        combined_r,
        r_squared: combined_r * combined_r,
        n: rs.len(),
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult<F> {
    /// `min(w_plus, w_minus)`.
    pub t: F,
    pub w_plus: F,
    pub w_minus: F,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonOutcome<F> {
    Statistic(WilcoxonResult<F>),
    /// Every paired difference was zero.
    Degenerate,
}

/// Wilcoxon signed-rank statistic for paired samples, with average ranks
/// for tied absolute differences.
pub fn wilcoxon_t<F: Float>(a: &[F], b: &[F]) -> Result<WilcoxonOutcome<F>, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut diffs: Vec<F> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != F::zero())
        .collect();
    if diffs.is_empty() {
        return Ok(WilcoxonOutcome::Degenerate);
    }
    diffs.sort_by(|p, q| p.abs().partial_cmp(&q.abs()).expect("differences are not NaN"));
    let two = F::one() + F::one();
    let (mut w_plus, mut w_minus) = (F::zero(), F::zero());
    let mut i = 0;
    while i < diffs.len() {
        let mut j = i + 1;
        while j < diffs.len() && diffs[j].abs() == diffs[i].abs() {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let rank = F::from(i + 1 + j).expect("rank fits") / two;
        for d in &diffs[i..j] {
            if *d > F::zero() {
                w_plus = w_plus + rank;
            } else {
                w_minus = w_minus + rank;
            }
        }
        i = j;
    }
    Ok(WilcoxonOutcome::Statistic(WilcoxonResult {
        t: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n_effective: diffs.len(),
    }))
}

/// Shannon entropy in bits with `0 log 0 = 0`.
pub fn entropy_bits<F: Float>(freqs: &[F]) -> F {
    freqs
        .iter()
        .filter(|p| **p > F::zero())
        .fold(F::zero(), |acc, &p| acc - p * p.log2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub counts: LabelMap<u64>,
    pub freqs: LabelMap<f64>,
}

impl LabelDistribution {
    pub fn from_labels(labels: impl IntoIterator<Item = ChoiceLabel>) -> Self {
        let mut counts = LabelMap([0u64; 4]);
        for l in labels {
            counts[l] += 1;
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: LabelMap<u64>) -> Self {
        let total: u64 = counts.values().iter().sum();
        let freqs = counts.map(|_, c| if total == 0 { 0.0 } else { *c as f64 / total as f64 });
        LabelDistribution { counts, freqs }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().iter().sum()
    }

    pub fn entropy(&self) -> f64 {
        entropy_bits(self.freqs.values())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    All,
    Subject,
}

/// Key used for the single group under [`GroupBy::All`].
pub const ALL_GROUP: &str = "all";

fn grouped(
    results: &[SelectionResult],
    group_by: GroupBy,
    pick: impl Fn(&SelectionResult) -> ChoiceLabel,
) -> BTreeMap<String, LabelDistribution> {
    let mut groups: BTreeMap<String, Vec<ChoiceLabel>> = BTreeMap::new();
    for r in results {
        let key = match group_by {
            GroupBy::All => ALL_GROUP.to_string(),
            GroupBy::Subject => r.subject.clone(),
        };
        groups.entry(key).or_default().push(pick(r));
    }
    if groups.is_empty() {
        tracing::warn!("no selections to summarize");
    }
    groups
        .into_iter()
        .map(|(k, labels)| (k, LabelDistribution::from_labels(labels)))
        .collect()
}

/// Distribution of chosen labels. Groups without results are absent.
pub fn selection_distribution(results: &[SelectionResult], group_by: GroupBy) -> BTreeMap<String, LabelDistribution> {
    grouped(results, group_by, |r| r.chosen)
}

/// Distribution of gold labels over the same selections.
pub fn gold_distribution(results: &[SelectionResult], group_by: GroupBy) -> BTreeMap<String, LabelDistribution> {
    grouped(results, group_by, |r| r.gold)
}

pub fn accuracy(results: &[SelectionResult]) -> Result<f64, StatsError> {
    if results.is_empty() {
        return Err(StatsError::Empty);
    }
    let correct = results.iter().filter(|r| r.is_correct).count();
    Ok(correct as f64 / results.len() as f64)
}

/// Correctness transitions from a baseline method to a comparison method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowTable {
    pub cc: u64,
    pub ci: u64,
    pub ic: u64,
    pub ii: u64,
}

impl FlowTable {
    pub fn total(&self) -> u64 {
        self.cc + self.ci + self.ic + self.ii
    }
}

/// Flow keyed by (question, permutation); both sets must cover the same keys.
pub fn flow_table(baseline: &[SelectionResult], comparison: &[SelectionResult]) -> Result<FlowTable, StatsError> {
    let index = |rs: &[SelectionResult]| -> BTreeMap<(String, usize), bool> {
        rs.iter()
            .map(|r| ((r.question_id.clone(), r.perm_index), r.is_correct))
            .collect()
    };
    let (base, comp) = (index(baseline), index(comparison));
    let base_keys: BTreeSet<_> = base.keys().collect();
    let comp_keys: BTreeSet<_> = comp.keys().collect();
    if base_keys != comp_keys {
        let only_base: Vec<_> = base_keys.difference(&comp_keys).collect();
        let only_comp: Vec<_> = comp_keys.difference(&base_keys).collect();
        let examples = only_base
            .iter()
            .chain(&only_comp)
            .take(10)
            .map(|(q, p)| format!("{q}#{p}"))
            .collect();
        return Err(StatsError::KeyMismatch {
            only_in_baseline: only_base.len(),
            only_in_comparison: only_comp.len(),
            examples,
        });
    }
    let mut table = FlowTable::default();
    for (key, &b) in &base {
        match (b, comp[key]) {
            (true, true) => table.cc += 1,
            (true, false) => table.ci += 1,
            (false, true) => table.ic += 1,
            (false, false) => table.ii += 1,
        }
    }
    Ok(table)
}
