//! Summary statistics over a finished (or partial) run.
//!
//! The summary is a pure function of the stored selection results and the
//! base-rate estimate; input order never matters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brp::{BrpEstimate, BrpMethod};
use crate::label::LabelMap;
use crate::selection::{Method, SelectionResult};
use crate::stats::{
    self, accuracy, fisher_aggregate, flow_table, pearson_r, wilcoxon_t, Correlation, FlowTable, GroupBy,
    LabelDistribution, WilcoxonOutcome, ALL_GROUP,
};

use super::store::{write_atomic, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectCorrelation {
    pub subject: String,
    /// `None` when either series has zero variance.
    pub r: Option<f64>,
    pub degenerate: bool,
    pub n_points: usize,
    pub n_selections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub per_subject: Vec<SubjectCorrelation>,
    /// Fisher-z pooled over the non-degenerate subjects.
    pub pooled: Option<stats::AggregateStats<f64>>,
    pub degenerate_subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonSummary {
    pub paired_subjects: usize,
    /// `true` when every paired difference is zero.
    pub indistinguishable: bool,
    pub t: Option<f64>,
    pub w_plus: Option<f64>,
    pub w_minus: Option<f64>,
    pub n_effective: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub baseline: Method,
    pub table: FlowTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSummary {
    pub n_selections: usize,
    pub distribution: LabelDistribution,
    pub entropy: f64,
    pub correlation: Option<CorrelationSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub n_selections: usize,
    pub accuracy: f64,
    pub distribution: LabelDistribution,
    pub entropy: f64,
    pub distribution_by_subject: BTreeMap<String, LabelDistribution>,
    pub correlation: Option<CorrelationSummary>,
    pub wilcoxon_vs_ground_truth: Option<WilcoxonSummary>,
    pub flow_vs_baseline: Option<FlowSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrpSummary {
    pub method: BrpMethod,
    pub orderings: usize,
    pub mean: LabelMap<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub brp: Option<BrpSummary>,
    pub ground_truth: Option<GroundTruthSummary>,
    pub methods: BTreeMap<Method, MethodSummary>,
    pub notices: Vec<String>,
}

fn correlate(brp: &LabelMap<f64>, by_subject: &BTreeMap<String, LabelDistribution>) -> CorrelationSummary {
    let per_subject: Vec<SubjectCorrelation> = by_subject
        .iter()
        .map(|(subject, dist)| {
            let r = pearson_r(brp.values(), dist.freqs.values()).expect("two 4-vectors");
            SubjectCorrelation {
                subject: subject.clone(),
                r: r.value(),
                degenerate: matches!(r, Correlation::Degenerate),
                n_points: 4,
                n_selections: dist.total(),
            }
        })
        .collect();
    let rs: Vec<f64> = per_subject.iter().filter_map(|s| s.r).collect();
    CorrelationSummary {
        pooled: fisher_aggregate(&rs).ok(),
        degenerate_subjects: per_subject.len() - rs.len(),
        per_subject,
    }
}

fn compare(method: &CorrelationSummary, truth: &CorrelationSummary) -> WilcoxonSummary {
    let truth_r: BTreeMap<&str, f64> = truth
        .per_subject
        .iter()
        .filter_map(|s| Some((s.subject.as_str(), s.r?)))
        .collect();
    let (a, b): (Vec<f64>, Vec<f64>) = method
        .per_subject
        .iter()
        .filter_map(|s| Some((s.r?, *truth_r.get(s.subject.as_str())?)))
        .unzip();
    let outcome = if a.is_empty() { None } else { wilcoxon_t(&a, &b).ok() };
    match outcome {
        Some(WilcoxonOutcome::Statistic(w)) => WilcoxonSummary {
            paired_subjects: a.len(),
            indistinguishable: false,
            t: Some(w.t),
            w_plus: Some(w.w_plus),
            w_minus: Some(w.w_minus),
            n_effective: w.n_effective,
        },
        _ => WilcoxonSummary {
            paired_subjects: a.len(),
            indistinguishable: !a.is_empty(),
            t: None,
            w_plus: None,
            w_minus: None,
            n_effective: 0,
        },
    }
}

/// Builds the summary from selection results of any methods.
pub fn build_summary(results: &[SelectionResult], brp: Option<&BrpEstimate>, baseline: Method) -> Summary {
    let mut notices = Vec::new();
    let mut sorted = results.to_vec();
    sorted.sort_by(|x, y| {
        (x.method, &x.question_id, x.perm_index).cmp(&(y.method, &y.question_id, y.perm_index))
    });
    let mut by_method: BTreeMap<Method, Vec<SelectionResult>> = BTreeMap::new();
    for r in sorted {
        by_method.entry(r.method).or_default().push(r);
    }
    if brp.is_none() {
        notices.push("no base-rate estimate; correlation sections skipped".to_string());
    }
    let brp_mean = brp.map(|b| b.mean);

    // One gold label per (question, ordering) seen by any method.
    let mut truth_rows: BTreeMap<(String, usize), SelectionResult> = BTreeMap::new();
    for rs in by_method.values() {
        for r in rs {
            truth_rows
                .entry((r.question_id.clone(), r.perm_index))
                .or_insert_with(|| r.clone());
        }
    }
    let truth_rows: Vec<SelectionResult> = truth_rows.into_values().collect();
    let ground_truth = (!truth_rows.is_empty()).then(|| {
        let distribution = stats::gold_distribution(&truth_rows, GroupBy::All).remove(ALL_GROUP).expect("non-empty");
        let correlation = brp_mean.map(|m| correlate(&m, &stats::gold_distribution(&truth_rows, GroupBy::Subject)));
        GroundTruthSummary {
            n_selections: truth_rows.len(),
            entropy: distribution.entropy(),
            distribution,
            correlation,
        }
    });

    let mut methods = BTreeMap::new();
    for (method, rs) in &by_method {
        let distribution = stats::selection_distribution(rs, GroupBy::All)
            .remove(ALL_GROUP)
            .expect("non-empty");
        let distribution_by_subject = stats::selection_distribution(rs, GroupBy::Subject);
        let correlation = brp_mean.map(|m| correlate(&m, &distribution_by_subject));
        let wilcoxon_vs_ground_truth = match (&correlation, ground_truth.as_ref().and_then(|g| g.correlation.as_ref())) {
            (Some(mc), Some(tc)) => Some(compare(mc, tc)),
            _ => None,
        };
        let flow_vs_baseline = if *method == baseline {
            None
        } else if let Some(base) = by_method.get(&baseline) {
            match flow_table(base, rs) {
                Ok(table) => Some(FlowSummary { baseline, table }),
                Err(e) => {
                    notices.push(format!("flow {baseline} -> {method} skipped: {e}"));
                    None
                }
            }
        } else {
            None
        };
        methods.insert(
            *method,
            MethodSummary {
                n_selections: rs.len(),
                accuracy: accuracy(rs).expect("non-empty"),
                entropy: distribution.entropy(),
                distribution,
                distribution_by_subject,
                correlation,
                wilcoxon_vs_ground_truth,
                flow_vs_baseline,
            },
        );
    }
    if !methods.is_empty() && !methods.contains_key(&baseline) {
        notices.push(format!("baseline method {baseline} has no results; flow tables skipped"));
    }

    Summary {
        brp: brp.map(|b| BrpSummary {
            method: b.method,
            orderings: b.per_ordering.len(),
            mean: b.mean,
        }),
        ground_truth,
        methods,
        notices,
    }
}

fn correlation_csv(c: &CorrelationSummary) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject", "r", "n"]).expect("in-memory write");
    for s in &c.per_subject {
        let r = s.r.map(|r| r.to_string()).unwrap_or_default();
        w.write_record([s.subject.as_str(), &r, &s.n_points.to_string()])
            .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Writes `summary.json`, per-method correlation CSVs and a distribution CSV.
pub fn write_report(dir: &Path, summary: &Summary) -> Result<(), StoreError> {
    std::fs::create_dir_all(dir).map_err(|source| StoreError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut json = serde_json::to_vec_pretty(summary).expect("summary serializes");
    json.push(b'\n');
    write_atomic(&dir.join("summary.json"), &json)?;

    if let Some(c) = summary.ground_truth.as_ref().and_then(|g| g.correlation.as_ref()) {
        write_atomic(&dir.join("correlations_ground_truth.csv"), &correlation_csv(c))?;
    }
    for (method, m) in &summary.methods {
        if let Some(c) = &m.correlation {
            write_atomic(&dir.join(format!("correlations_{method}.csv")), &correlation_csv(c))?;
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "subject", "A", "B", "C", "D"]).expect("in-memory write");
    let mut row = |method: &str, subject: &str, d: &LabelDistribution| {
        let counts = d.counts.values().map(|c| c.to_string());
        let mut fields = vec![method.to_string(), subject.to_string()];
        fields.extend(counts);
        w.write_record(&fields).expect("in-memory write");
    };
    if let Some(g) = &summary.ground_truth {
        row("ground_truth", ALL_GROUP, &g.distribution);
    }
    for (method, m) in &summary.methods {
        row(method.as_str(), ALL_GROUP, &m.distribution);
        for (subject, d) in &m.distribution_by_subject {
            row(method.as_str(), subject, d);
        }
    }
    write_atomic(&dir.join("distributions.csv"), &w.into_inner().expect("in-memory flush"))
}
