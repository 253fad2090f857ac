use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::LeadingSpace;
use crate::brp::BrpMethod;
use crate::dataset::{Dataset, DatasetFormat, Question};
use crate::label::{enumerate_label_permutations, LabelPermutation, PERMUTATION_COUNT};
use crate::prompts::{DEFAULT_FILLER_CHOICE, DEFAULT_FILLER_QUESTION};
use crate::selection::{Method, SelectionOptions};

/// Which label orderings each question is evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PermutationPolicy {
    All24,
    Identity,
    Sample { count: usize, seed: u64 },
}

impl PermutationPolicy {
    pub fn permutations(&self) -> Vec<LabelPermutation> {
        match *self {
            PermutationPolicy::All24 => enumerate_label_permutations(),
            PermutationPolicy::Identity => vec![LabelPermutation::identity()],
            PermutationPolicy::Sample { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked = index::sample(&mut rng, PERMUTATION_COUNT, count.min(PERMUTATION_COUNT)).into_vec();
                picked.sort_unstable();
                picked
                    .into_iter()
                    .map(|i| LabelPermutation::from_index(i).expect("index below 24"))
                    .collect()
            }
        }
    }
}

impl fmt::Display for PermutationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PermutationPolicy::All24 => f.write_str("all24"),
            PermutationPolicy::Identity => f.write_str("identity"),
            PermutationPolicy::Sample { count, seed } => write!(f, "sample:{count}:{seed}"),
        }
    }
}

impl FromStr for PermutationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split(':').collect::<Vec<_>>().as_slice() {
            ["all24"] => Ok(PermutationPolicy::All24),
            ["identity"] => Ok(PermutationPolicy::Identity),
            ["sample", count] | ["sample", count, _] if count.parse::<usize>().is_err() => {
                Err(format!("bad permutation count {count:?}"))
            }
            ["sample", count] => Ok(PermutationPolicy::Sample {
                count: count.parse().expect("checked above"),
                seed: 0,
            }),
            ["sample", count, seed] => Ok(PermutationPolicy::Sample {
                count: count.parse().expect("checked above"),
                seed: seed.parse().map_err(|_| format!("bad permutation seed {seed:?}"))?,
            }),
            _ => Err(format!("unknown permutation policy {s:?} (all24, identity, sample:M[:SEED])")),
        }
    }
}

impl TryFrom<String> for PermutationPolicy {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PermutationPolicy> for String {
    fn from(p: PermutationPolicy) -> String {
        p.to_string()
    }
}

/// Which questions of the dataset are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QuestionSample {
    All,
    First(usize),
    Sample { count: usize, seed: u64 },
    PerSubject { count: usize, seed: u64 },
}

fn seeded_subset<'a>(questions: &[&'a Question], count: usize, seed: u64) -> Vec<&'a Question> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, questions.len(), count.min(questions.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| questions[i]).collect()
}

impl QuestionSample {
    /// Selected questions, in dataset order.
    pub fn apply<'a>(&self, dataset: &'a Dataset) -> Vec<&'a Question> {
        let all: Vec<&Question> = dataset.questions.iter().collect();
        match *self {
            QuestionSample::All => all,
            QuestionSample::First(n) => all.into_iter().take(n).collect(),
            QuestionSample::Sample { count, seed } => seeded_subset(&all, count, seed),
            QuestionSample::PerSubject { count, seed } => {
                let mut keep = std::collections::HashSet::new();
                for subject in &dataset.subjects {
                    let pool: Vec<&Question> = all.iter().copied().filter(|q| &q.subject == subject).collect();
                    let subject_seed = crate::seed::stable_hash([&seed.to_le_bytes()[..], subject.as_bytes()]);
                    keep.extend(seeded_subset(&pool, count, subject_seed).into_iter().map(|q| q.id.as_str()));
                }
                all.into_iter().filter(|q| keep.contains(q.id.as_str())).collect()
            }
        }
    }
}

impl fmt::Display for QuestionSample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuestionSample::All => f.write_str("all"),
            QuestionSample::First(n) => write!(f, "first:{n}"),
            QuestionSample::Sample { count, seed } => write!(f, "sample:{count}:{seed}"),
            QuestionSample::PerSubject { count, seed } => write!(f, "per-subject:{count}:{seed}"),
        }
    }
}

impl FromStr for QuestionSample {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| v.parse::<u64>().map_err(|_| format!("bad number {v:?} in question sample {s:?}"));
        match parts.as_slice() {
            ["all"] => Ok(QuestionSample::All),
            ["first", n] => Ok(QuestionSample::First(num(n)? as usize)),
            ["sample", n, seed] => Ok(QuestionSample::Sample {
                count: num(n)? as usize,
                seed: num(seed)?,
            }),
            ["per-subject", n, seed] => Ok(QuestionSample::PerSubject {
                count: num(n)? as usize,
                seed: num(seed)?,
            }),
            _ => Err(format!(
                "unknown question sample {s:?} (all, first:N, sample:N:SEED, per-subject:N:SEED)"
            )),
        }
    }
}

impl TryFrom<String> for QuestionSample {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<QuestionSample> for String {
    fn from(q: QuestionSample) -> String {
        q.to_string()
    }
}

/// Where scores and generations come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    /// Rule-driven mock loaded from a config file (TOML or JSON).
    Mock(PathBuf),
    /// Server speaking the native `/score` + `/generate` protocol.
    Native(String),
    /// OpenAI-style completions endpoint.
    OpenAi { url: String, model: String },
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Mock(p) => write!(f, "mock:{}", p.display()),
            BackendSpec::Native(url) => write!(f, "native:{url}"),
            BackendSpec::OpenAi { url, model } => write!(f, "openai:{model}@{url}"),
        }
    }
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("mock:") {
            Ok(BackendSpec::Mock(PathBuf::from(path)))
        } else if let Some(url) = s.strip_prefix("native:") {
            Ok(BackendSpec::Native(url.to_string()))
        } else if let Some(rest) = s.strip_prefix("openai:") {
            let (model, url) = rest
                .split_once('@')
                .ok_or_else(|| format!("openai backend needs MODEL@URL, got {rest:?}"))?;
            Ok(BackendSpec::OpenAi {
                url: url.to_string(),
                model: model.to_string(),
            })
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(BackendSpec::Native(s.to_string()))
        } else {
            Err(format!(
                "unknown backend {s:?} (mock:PATH, native:URL, openai:MODEL@URL)"
            ))
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        b.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrpConfig {
    pub enabled: bool,
    pub method: BrpMethod,
    pub permutations: PermutationPolicy,
    pub filler_question: String,
    pub filler_choice: String,
}

impl Default for BrpConfig {
    fn default() -> Self {
        BrpConfig {
            enabled: true,
            method: BrpMethod::Cloze,
            permutations: PermutationPolicy::All24,
            filler_question: DEFAULT_FILLER_QUESTION.into(),
            filler_choice: DEFAULT_FILLER_CHOICE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub dataset_format: DatasetFormat,
    pub backend: Option<BackendSpec>,
    pub methods: Vec<Method>,
    pub permutations: PermutationPolicy,
    pub iterations: u32,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub leading_space: LeadingSpace,
    pub questions: QuestionSample,
    pub base_seed: u64,
    pub max_in_flight: usize,
    pub retries: u32,
    pub run_dir: PathBuf,
    pub baseline_method: Method,
    pub brp: BrpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            dataset_format: DatasetFormat::MmluCsv,
            backend: None,
            methods: vec![Method::Cf, Method::CfCot, Method::Apricot],
            permutations: PermutationPolicy::Sample { count: 4, seed: 0 },
            iterations: 10,
            max_new_tokens: 100,
            temperature: 1.0,
            leading_space: LeadingSpace::On,
            questions: QuestionSample::All,
            base_seed: 0,
            max_in_flight: 8,
            retries: 3,
            run_dir: PathBuf::from("runs/latest"),
            baseline_method: Method::Cf,
            brp: BrpConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|message| ConfigError::Read {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return bad("methods listed more than once");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be non-negative");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        for policy in [self.permutations, self.brp.permutations] {
            if let PermutationPolicy::Sample { count, .. } = policy {
                if count == 0 || count > PERMUTATION_COUNT {
                    return bad("sampled permutation count must lie in 1..=24");
                }
            }
        }
        if self.brp.filler_question.is_empty() || self.brp.filler_choice.is_empty() {
            return bad("BRP fillers must be non-empty");
        }
        if self.dataset.as_os_str().is_empty() {
            return bad("dataset path is required");
        }
        Ok(())
    }

    pub fn selection_options(&self) -> SelectionOptions {
        SelectionOptions {
            iterations: self.iterations,
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            leading_space: self.leading_space,
            base_seed: self.base_seed,
        }
    }

    /// Fields that differ between two configs, ignoring those that cannot
    /// change results (run directory, concurrency, retries, backend).
    pub fn result_affecting_diff(&self, other: &RunConfig) -> Vec<String> {
        let strip = |c: &RunConfig| {
            let mut v = serde_json::to_value(c).expect("config serializes");
            let obj = v.as_object_mut().expect("config is an object");
            for k in ["run_dir", "max_in_flight", "retries", "backend"] {
                obj.remove(k);
            }
            v
        };
        let (a, b) = (strip(self), strip(other));
        let (a, b) = (a.as_object().expect("object"), b.as_object().expect("object"));
        let mut diff = Vec::new();
        for (k, va) in a {
            let vb = &b[k];
            if va != vb {
                diff.push(format!("{k}: {va} != {vb}"));
            }
        }
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_strings_round_trip() {
        for s in ["all24", "identity", "sample:4:7"] {
            assert_eq!(s.parse::<PermutationPolicy>().unwrap().to_string(), s);
        }
        for s in ["all", "first:10", "sample:5:1", "per-subject:3:9"] {
            assert_eq!(s.parse::<QuestionSample>().unwrap().to_string(), s);
        }
        assert!("sample:x".parse::<PermutationPolicy>().is_err());
        assert_eq!(
            "openai:llama@http://h:8000".parse::<BackendSpec>().unwrap(),
            BackendSpec::OpenAi {
                url: "http://h:8000".into(),
                model: "llama".into()
            }
        );
    }

    #[test]
    fn sampled_permutations_are_distinct_and_seeded() {
        let p = PermutationPolicy::Sample { count: 4, seed: 11 }.permutations();
        assert_eq!(p.len(), 4);
        let mut idx: Vec<_> = p.iter().map(|p| p.index()).collect();
        idx.dedup();
        assert_eq!(idx.len(), 4);
        assert_eq!(p, PermutationPolicy::Sample { count: 4, seed: 11 }.permutations());
        assert_eq!(PermutationPolicy::All24.permutations().len(), 24);
    }

    #[test]
    fn toml_config_with_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            dataset = "data"
            methods = ["cf", "apricot"]
            permutations = "identity"
            iterations = 2
            [brp]
            method = "cf"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.methods, vec![Method::Cf, Method::Apricot]);
        assert_eq!(cfg.permutations, PermutationPolicy::Identity);
        assert_eq!(cfg.max_new_tokens, 100);
        assert_eq!(cfg.brp.method, BrpMethod::Cf);
        cfg.validate().unwrap();
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let base = RunConfig {
            dataset: "d".into(),
            ..Default::default()
        };
        base.validate().unwrap();
        let mut c = base.clone();
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.permutations = PermutationPolicy::Sample { count: 25, seed: 0 };
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.methods = vec![Method::Cf, Method::Cf];
        assert!(c.validate().is_err());
    }

    #[test]
    fn diff_ignores_operational_fields() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.max_in_flight = 16;
        b.run_dir = "elsewhere".into();
        assert!(a.result_affecting_diff(&b).is_empty());
        b.iterations = 3;
        assert_eq!(a.result_affecting_diff(&b), vec!["iterations: 10 != 3".to_string()]);
    }
}
