//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use labelbias_core::backend::{
    Backend, BackendError, CanaryRule, ChainTemplates, GenerateRequest, GenerateResponse, Knowledge, MockConfig,
    ScoreRequest, ScoreResponse,
};
use labelbias_core::runner::RunConfig;
use labelbias_core::{LabelMap, Method, Question};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture(rel)).unwrap_or_else(|e| panic!("fixture {rel}: {e}"))
}

pub fn two_plus_two() -> Question {
    Question::new("math/1", "math", "What is 2+2?", ["1", "3", "4", "5"].map(String::from), 2).unwrap()
}

/// Compares two JSON texts byte for byte except inside number literals,
/// which must agree within `tol` (relative for large magnitudes).
pub fn same_modulo_floats(actual: &str, expected: &str, tol: f64) -> Result<(), String> {
    fn split(s: &str) -> Vec<(bool, &str)> {
        let bytes = s.as_bytes();
        let mut out = Vec::new();
        let (mut i, mut start, mut in_string) = (0, 0, false);
        while i < bytes.len() {
            let c = bytes[i];
            if in_string {
                if c == b'\\' {
                    i += 2;
                    continue;
                }
                if c == b'"' {
                    in_string = false;
                }
                i += 1;
                continue;
            }
            if c == b'"' {
                in_string = true;
                i += 1;
                continue;
            }
            if c == b'-' || c.is_ascii_digit() {
                if start < i {
                    out.push((false, &s[start..i]));
                }
                let begin = i;
                while i < bytes.len() && matches!(bytes[i], b'-' | b'+' | b'.' | b'e' | b'E' | b'0'..=b'9') {
                    i += 1;
                }
                out.push((true, &s[begin..i]));
                start = i;
                continue;
            }
            i += 1;
        }
        if start < bytes.len() {
            out.push((false, &s[start..]));
        }
        out
    }
    let (a, e) = (split(actual.trim_end()), split(expected.trim_end()));
    if a.len() != e.len() {
        return Err(format!("structure differs:\n  actual:   {actual}\n  expected: {expected}"));
    }
    for ((an, at), (en, et)) in a.iter().zip(&e) {
        match (an, en) {
            (true, true) => {
                let (x, y): (f64, f64) = (at.parse().unwrap(), et.parse().unwrap());
                if (x - y).abs() > tol * y.abs().max(1.0) {
                    return Err(format!("number {at} != {et}"));
                }
            }
            _ if at == et && an == en => {}
            _ => return Err(format!("bytes differ: {at:?} vs {et:?}")),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Independent oracles for the statistics kernels.

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite input")
}

/// Pearson r from exact rational sums; the only rounding is the final
/// square root.
pub fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = BigRational::from_integer(BigInt::from(x.len()));
    let xs: Vec<_> = x.iter().map(|v| exact(*v)).collect();
    let ys: Vec<_> = y.iter().map(|v| exact(*v)).collect();
    let mx = xs.iter().fold(BigRational::zero(), |a, b| a + b) / &n;
    let my = ys.iter().fold(BigRational::zero(), |a, b| a + b) / &n;
    let (mut sxy, mut sxx, mut syy) = (BigRational::zero(), BigRational::zero(), BigRational::zero());
    for (a, b) in xs.iter().zip(&ys) {
        let (dx, dy) = (a - &mx, b - &my);
        sxy += &dx * &dy;
        sxx += &dx * &dx;
        syy += &dy * &dy;
    }
    if sxx.is_zero() || syy.is_zero() {
        return None;
    }
    let r2 = (&sxy * &sxy / (sxx * syy)).to_f64().unwrap();
    let r = r2.sqrt();
    Some(if sxy.is_negative() { -r } else { r })
}

/// Fisher pooling written out from the logarithmic and exponential
/// definitions of atanh and tanh.
pub fn oracle_fisher(rs: &[f64]) -> (f64, f64) {
    let limit = 1.0 - 1e-12;
    let z: f64 = rs
        .iter()
        .map(|r| r.clamp(-limit, limit))
        .map(|r| 0.5 * ((1.0 + r) / (1.0 - r)).ln())
        .sum::<f64>()
        / rs.len() as f64;
    let e = (2.0 * z).exp();
    (z, (e - 1.0) / (e + 1.0))
}

/// Signed-rank T by counting: rank(i) = #{|d_j| < |d_i|} + (#{|d_j| = |d_i|} + 1) / 2.
pub fn oracle_wilcoxon(a: &[f64], b: &[f64]) -> Option<f64> {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return None;
    }
    let (mut plus, mut minus) = (0.0, 0.0);
    for di in &d {
        let below = d.iter().filter(|dj| dj.abs() < di.abs()).count() as f64;
        let tied = d.iter().filter(|dj| dj.abs() == di.abs()).count() as f64;
        let rank = below + (tied + 1.0) / 2.0;
        if *di > 0.0 {
            plus += rank;
        } else {
            minus += rank;
        }
    }
    Some(f64::min(plus, minus))
}

// ---------------------------------------------------------------------------
// Corpora and configurations.

pub const SUBJECTS: [&str; 4] = ["astronomy", "botany", "chemistry", "geology"];

/// `n` questions spread over [`SUBJECTS`], gold slot cycling 0..4 so every
/// slot carries the gold answer equally often.
pub fn corpus(n: usize) -> Vec<Question> {
    (0..n)
        .map(|i| {
            let subject = SUBJECTS[i % SUBJECTS.len()];
            let choices = std::array::from_fn(|slot| format!("option {slot} of item {i}"));
            Question::new(format!("{subject}/{i}"), subject, format!("Item {i}: which option holds?"), choices, (i / 4 + i) % 4)
                .unwrap()
        })
        .collect()
}

pub fn write_corpus(dir: &Path, questions: &[Question]) -> PathBuf {
    let path = dir.join("corpus.csv");
    let mut w = csv::Writer::from_path(&path).unwrap();
    w.write_record(["id", "subject", "question", "choice_0", "choice_1", "choice_2", "choice_3", "gold_index"])
        .unwrap();
    for q in questions {
        let gold = q.gold_index.to_string();
        let mut row = vec![q.id.as_str(), q.subject.as_str(), q.text.as_str()];
        row.extend(q.choices.iter().map(String::as_str));
        row.push(&gold);
        w.write_record(row).unwrap();
    }
    w.flush().unwrap();
    path
}

pub fn run_config(dataset: &Path, run_dir: &Path, methods: &[Method]) -> RunConfig {
    RunConfig {
        dataset: dataset.to_path_buf(),
        dataset_format: labelbias_core::DatasetFormat::GenericCsv,
        methods: methods.to_vec(),
        run_dir: run_dir.to_path_buf(),
        ..RunConfig::default()
    }
}

/// Canary depends only on the queried label.
pub fn label_preference_mock(preference: [f64; 4]) -> MockConfig {
    MockConfig {
        label_brp: LabelMap(preference),
        canary_table: labelbias_core::ChoiceLabel::ALL
            .into_iter()
            .map(|l| CanaryRule::for_label(l, preference[l.index()]))
            .collect(),
        ..MockConfig::default()
    }
}

/// Unprimed chains always argue for choice C; the canary rewards a chain
/// that names the queried label, and the mock "knows" each gold answer.
pub fn confirmation_mock(questions: &[Question]) -> MockConfig {
    MockConfig {
        canary_table: vec![CanaryRule::for_chain("choice {label}", 0.5)],
        default_canary: 0.1,
        chain_templates: ChainTemplates {
            unprimed: vec![
                "Looking over the options, choice C stands out.".into(),
                "The wording points to choice C.".into(),
                "Of all four, choice C reads best.".into(),
            ],
            primed: vec!["Checking choice {label}: {text}.".into()],
        },
        per_question_knowledge: questions
            .iter()
            .map(|q| Knowledge {
                question: q.text.clone(),
                answer: q.choices[q.gold_index].clone(),
                boost: 0.3,
            })
            .collect(),
        ..MockConfig::default()
    }
}

/// Passes calls through until `budget` is spent, then fails every call
/// with a transport error.
pub struct FailAfter<B> {
    pub inner: B,
    pub budget: std::sync::atomic::AtomicUsize,
}

impl<B> FailAfter<B> {
    pub fn new(inner: B, budget: usize) -> Self {
        FailAfter {
            inner,
            budget: budget.into(),
        }
    }

    fn spend(&self) -> Result<(), BackendError> {
        use std::sync::atomic::Ordering;
        self.budget
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
            .map(|_| ())
            .map_err(|_| BackendError::Transport("connection reset".into()))
    }
}

impl<B: Backend> Backend for FailAfter<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.spend()?;
        self.inner.score(req)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        self.spend()?;
        self.inner.generate(req)
    }
}
