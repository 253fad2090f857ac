//! Experiment orchestration.
//!
//! A run directory holds:
//!
//! ```text
//! manifest.json   config snapshot, dataset digest, BRP estimate, timestamps
//! brp.json        base-rate estimate
//! trials.jsonl    one TrialRecord per measured (question, method, ordering, iteration, option)
//! results.jsonl   one SelectionResult per (question, method, ordering)
//! report/         summary.json and CSV tables
//! ```
//!
//! Trials are appended as they complete, so an interrupted run resumes by
//! measuring only the missing trial keys. Seeds derive from trial identity,
//! which makes results independent of concurrency and scheduling.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, MockBackend, MockConfig, NativeClient, OpenAiCompletions, Retrying};
use crate::brp::{estimate_brp, BrpError, BrpEstimate, BrpOptions};
use crate::dataset::{load_dataset, Dataset, DatasetError, Question};
use crate::label::LabelPermutation;
use crate::selection::{Engine, Method, SelectionError, SelectionResult, TrialKey, TrialRecord};

pub mod config;
pub mod report;
pub mod store;

pub use config::{BackendSpec, BrpConfig, ConfigError, PermutationPolicy, QuestionSample, RunConfig};
pub use report::{build_summary, write_report, Summary};
pub use store::StoreError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BRP_FILE: &str = "brp.json";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const REPORT_DIR: &str = "report";

/// Environment variable consulted for the backend when none is configured.
pub const BACKEND_ENV: &str = "LABELBIAS_BACKEND_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub harness_version: String,
    pub config: RunConfig,
    pub dataset_digest: String,
    pub question_count: usize,
    pub subjects: usize,
    pub permutation_indices: Vec<usize>,
    pub brp: Option<BrpEstimate>,
    pub started_at: DateTime<Utc>,
    #[serde(default)]
    pub resumed_at: Vec<DateTime<Utc>>,
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("dataset selection is empty; nothing to run")]
    EmptyDataset,
    #[error("run directory {0} already holds a run; use resume")]
    AlreadyExists(PathBuf),
    #[error("no run found in {0}")]
    NotARun(PathBuf),
    #[error("configuration differs from the stored run:\n  {}", .0.join("\n  "))]
    ConfigMismatch(Vec<String>),
    #[error("dataset changed since the run started (digest {stored} != {current})")]
    DatasetChanged { stored: String, current: String },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(BackendError),
    #[error("base-rate estimation failed: {0}")]
    Brp(#[from] BrpError),
    #[error("run incomplete: {completed} of {total} selections done; first failure: {first}")]
    Partial {
        completed: usize,
        total: usize,
        first: SelectionError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl RunError {
    /// Process exit code: 2 config, 3 backend, 4 partial run.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_)
            | RunError::Dataset(_)
            | RunError::EmptyDataset
            | RunError::AlreadyExists(_)
            | RunError::NotARun(_)
            | RunError::ConfigMismatch(_)
            | RunError::DatasetChanged { .. } => 2,
            RunError::BackendUnavailable(_) | RunError::Brp(_) | RunError::Store(_) => 3,
            RunError::Partial { .. } => 4,
        }
    }
}

/// Counts of work done by one `run` or `resume` call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub selections_total: usize,
    pub selections_new: usize,
    pub trials_new: usize,
    pub trials_reused: usize,
}

/// Opens the configured backend (falling back to [`BACKEND_ENV`]) wrapped
/// in transport retries.
pub fn open_backend(config: &RunConfig) -> Result<Box<dyn Backend>, RunError> {
    let spec = match &config.backend {
        Some(s) => s.clone(),
        None => std::env::var(BACKEND_ENV)
            .map_err(|_| ConfigError::Invalid(format!("no backend configured and {BACKEND_ENV} unset")))?
            .parse()
            .map_err(ConfigError::Invalid)?,
    };
    let retry = |b: Box<dyn Backend>| -> Box<dyn Backend> {
        Box::new(Retrying::new(b, config.retries + 1, Duration::from_millis(500)))
    };
    match spec {
        BackendSpec::Mock(path) => Ok(Box::new(MockBackend::new(load_mock_config(&path)?).map_err(ConfigError::Invalid)?)),
        BackendSpec::Native(url) => Ok(retry(Box::new(NativeClient::new(&url).map_err(RunError::BackendUnavailable)?))),
        BackendSpec::OpenAi { url, model } => match OpenAiCompletions::connect(&url, &model) {
            Ok(b) => Ok(retry(Box::new(b))),
            Err(e @ BackendError::Capability(_)) => Err(ConfigError::Invalid(e.to_string()).into()),
            Err(e) => Err(RunError::BackendUnavailable(e)),
        },
    }
}

pub fn load_mock_config(path: &Path) -> Result<MockConfig, ConfigError> {
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

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    store::write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest, RunError> {
    let path = run_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(RunError::NotARun(run_dir.to_path_buf()));
    }
    Ok(read_json(&path)?)
}

fn selected_dataset(config: &RunConfig) -> Result<Dataset, RunError> {
    let full = load_dataset(&config.dataset, config.dataset_format)?;
    let questions: Vec<Question> = config.questions.apply(&full).into_iter().cloned().collect();
    let ds = Dataset::from_questions(questions).map_err(ConfigError::Invalid)?;
    if ds.is_empty() {
        return Err(RunError::EmptyDataset);
    }
    Ok(ds)
}

/// Measures base rates as configured and stores them in `brp.json`.
pub fn measure_brp(backend: &dyn Backend, config: &RunConfig, run_dir: &Path) -> Result<BrpEstimate, RunError> {
    let options = BrpOptions {
        filler_question: config.brp.filler_question.clone(),
        filler_choice: config.brp.filler_choice.clone(),
        leading_space: config.leading_space,
    };
    let perms = config.brp.permutations.permutations();
    match estimate_brp(backend, &perms, &options, config.brp.method) {
        Ok(est) => {
            write_json(&run_dir.join(BRP_FILE), &est)?;
            Ok(est)
        }
        Err(e) => {
            if let BrpError::Backend { partial, .. } = &e {
                write_json(&run_dir.join("brp.partial.json"), partial)?;
            }
            Err(e.into())
        }
    }
}

/// Starts a fresh run in `config.run_dir`.
pub fn run(config: &RunConfig, backend: &dyn Backend) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let dataset = selected_dataset(config)?;
    let run_dir = config.run_dir.clone();
    if run_dir.join(MANIFEST_FILE).exists() {
        return Err(RunError::AlreadyExists(run_dir));
    }
    std::fs::create_dir_all(&run_dir).map_err(|source| StoreError::Io {
        path: run_dir.clone(),
        source,
    })?;
    let mut manifest = RunManifest {
        harness_version: crate::VERSION.to_string(),
        config: config.clone(),
        dataset_digest: dataset.digest(),
        question_count: dataset.len(),
        subjects: dataset.subjects.len(),
        permutation_indices: config.permutations.permutations().iter().map(|p| p.index()).collect(),
        brp: None,
        started_at: Utc::now(),
        resumed_at: Vec::new(),
        finished_at: None,
    };
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    execute(config, &dataset, backend, &mut manifest)
}

/// Continues an interrupted run. `override_config`, when given, must agree
/// with the stored configuration on every result-affecting field.
pub fn resume(run_dir: &Path, override_config: Option<&RunConfig>, backend: &dyn Backend) -> Result<RunOutcome, RunError> {
    let mut manifest = read_manifest(run_dir)?;
    let mut config = manifest.config.clone();
    if let Some(o) = override_config {
        let diff = manifest.config.result_affecting_diff(o);
        if !diff.is_empty() {
            return Err(RunError::ConfigMismatch(diff));
        }
        config.max_in_flight = o.max_in_flight;
        config.retries = o.retries;
        if o.backend.is_some() {
            config.backend = o.backend.clone();
        }
    }
    config.run_dir = run_dir.to_path_buf();
    let dataset = selected_dataset(&config)?;
    let current = dataset.digest();
    if current != manifest.dataset_digest {
        return Err(RunError::DatasetChanged {
            stored: manifest.dataset_digest.clone(),
            current,
        });
    }
    manifest.resumed_at.push(Utc::now());
    write_json(&run_dir.join(MANIFEST_FILE), &manifest)?;
    execute(&config, &dataset, backend, &mut manifest)
}

/// Loads the stored results and rewrites `report/` from them.
pub fn report(run_dir: &Path) -> Result<Summary, RunError> {
    let manifest = read_manifest(run_dir)?;
    let results: Vec<SelectionResult> = store::load(&run_dir.join(RESULTS_FILE))?;
    let brp = match manifest.brp {
        Some(b) => Some(b),
        None if run_dir.join(BRP_FILE).exists() => Some(read_json(&run_dir.join(BRP_FILE))?),
        None => None,
    };
    let summary = build_summary(&dedup_results(results), brp.as_ref(), manifest.config.baseline_method);
    write_report(&run_dir.join(REPORT_DIR), &summary)?;
    Ok(summary)
}

fn dedup_results(results: Vec<SelectionResult>) -> Vec<SelectionResult> {
    let mut seen = HashSet::new();
    results
        .into_iter()
        .filter(|r| seen.insert((r.method, r.question_id.clone(), r.perm_index)))
        .collect()
}

enum StoreMsg {
    Trial(TrialRecord),
    Result(SelectionResult),
}

fn execute(
    config: &RunConfig,
    dataset: &Dataset,
    backend: &dyn Backend,
    manifest: &mut RunManifest,
) -> Result<RunOutcome, RunError> {
    let run_dir = config.run_dir.clone();

    if config.brp.enabled && manifest.brp.is_none() {
        let est = if run_dir.join(BRP_FILE).exists() {
            read_json(&run_dir.join(BRP_FILE))?
        } else {
            measure_brp(backend, config, &run_dir)?
        };
        manifest.brp = Some(est);
        write_json(&run_dir.join(MANIFEST_FILE), manifest)?;
    }

    let trials_path = run_dir.join(TRIALS_FILE);
    let results_path = run_dir.join(RESULTS_FILE);
    let mut prior: HashMap<TrialKey, TrialRecord> = HashMap::new();
    for t in store::load::<TrialRecord>(&trials_path)? {
        prior.entry(t.key()).or_insert(t);
    }
    let done: HashSet<(Method, String, usize)> = dedup_results(store::load(&results_path)?)
        .into_iter()
        .map(|r| (r.method, r.question_id, r.perm_index))
        .collect();

    let perms: Vec<LabelPermutation> = config.permutations.permutations();
    let mut units: Vec<(Method, &Question, LabelPermutation)> = Vec::new();
    let mut methods = config.methods.clone();
    methods.sort();
    for method in &methods {
        for q in &dataset.questions {
            for p in &perms {
                units.push((*method, q, *p));
            }
        }
    }
    let total = units.len();
    let pending: Vec<_> = units
        .into_iter()
        .filter(|(m, q, p)| !done.contains(&(*m, q.id.clone(), p.index())))
        .collect();
    tracing::info!(total, pending = pending.len(), reusable_trials = prior.len(), "executing run");

    let options = config.selection_options();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<SelectionError>> = Mutex::new(None);
    let reused = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<StoreMsg>();

    let writer_result = thread::scope(|scope| {
        let writer = scope.spawn(move || -> Result<(usize, usize), StoreError> {
            let mut trials = store::JsonlWriter::open(&trials_path)?;
            let mut results = store::JsonlWriter::open(&results_path)?;
            let (mut n_trials, mut n_results) = (0, 0);
            for msg in rx {
                match msg {
                    StoreMsg::Trial(t) => {
                        trials.append(&t)?;
                        n_trials += 1;
                    }
                    StoreMsg::Result(r) => {
                        results.append(&r)?;
                        n_results += 1;
                    }
                }
            }
            trials.sync()?;
            results.sync()?;
            Ok((n_trials, n_results))
        });

        let workers = config.max_in_flight.min(pending.len()).max(1);
        for _ in 0..workers {
            let tx = tx.clone();
            let (pending, prior, options, next, stop, failure, reused) =
                (&pending, &prior, &options, &next, &stop, &failure, &reused);
            scope.spawn(move || {
                let trial_tx = Mutex::new(tx.clone());
                let sink = |t: &TrialRecord| {
                    let _ = trial_tx.lock().expect("sender lock").send(StoreMsg::Trial(t.clone()));
                };
                let engine = Engine::new(backend, options).with_prior(prior).with_sink(&sink);
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((method, q, perm)) = pending.get(i) else { break };
                    match engine.select(*method, q, perm) {
                        Ok(sel) => {
                            let fresh = sel.trials.iter().filter(|t| !prior.contains_key(&t.key())).count();
                            reused.fetch_add(sel.trials.len() - fresh, Ordering::SeqCst);
                            let _ = tx.send(StoreMsg::Result(sel.result));
                        }
                        Err(e) => {
                            tracing::error!(error = %e, "selection failed; stopping");
                            stop.store(true, Ordering::SeqCst);
                            failure.lock().expect("failure lock").get_or_insert(e);
                        }
                    }
                }
            });
        }
        drop(tx);
        writer.join().expect("store writer panicked")
    });
    let (trials_new, selections_new) = writer_result?;

    let outcome = RunOutcome {
        run_dir: run_dir.clone(),
        selections_total: total,
        selections_new,
        trials_new,
        trials_reused: reused.into_inner(),
    };
    if let Some(first) = failure.into_inner().expect("failure lock") {
        return Err(RunError::Partial {
            completed: done.len() + selections_new,
            total,
            first,
        });
    }
    manifest.finished_at = Some(Utc::now());
    write_json(&run_dir.join(MANIFEST_FILE), manifest)?;
    report(&run_dir)?;
    Ok(outcome)
}
