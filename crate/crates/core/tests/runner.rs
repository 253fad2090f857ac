mod common;

use std::io::Write;

use common::*;
use labelbias_core::runner::{self, PermutationPolicy, QuestionSample, RunError};
use labelbias_core::{Method, MockBackend};

fn small_config(dir: &std::path::Path, n: usize) -> (runner::RunConfig, Vec<labelbias_core::Question>) {
    let questions = corpus(n);
    let data = write_corpus(dir, &questions);
    let mut c = run_config(&data, &dir.join("run"), &[Method::Cf, Method::Apricot]);
    c.iterations = 2;
    c.permutations = PermutationPolicy::Identity;
    (c, questions)
}

#[test]
fn run_writes_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (c, qs) = small_config(dir.path(), 8);
    let out = runner::run(&c, &MockBackend::new(confirmation_mock(&qs)).unwrap()).unwrap();
    assert_eq!((out.selections_total, out.selections_new), (16, 16));
    for f in ["manifest.json", "brp.json", "trials.jsonl", "results.jsonl", "report/summary.json", "report/distributions.csv"] {
        assert!(c.run_dir.join(f).exists(), "{f} missing");
    }
    let manifest = runner::read_manifest(&c.run_dir).unwrap();
    assert!(manifest.finished_at.is_some());
    assert_eq!(manifest.question_count, 8);
    let summary = std::fs::read_to_string(c.run_dir.join("report/summary.json")).unwrap();
    assert!(!summary.contains("started_at"), "timestamps leak into the summary");
}

#[test]
fn report_is_reproducible_from_stored_results() {
    let dir = tempfile::tempdir().unwrap();
    let (c, qs) = small_config(dir.path(), 8);
    runner::run(&c, &MockBackend::new(confirmation_mock(&qs)).unwrap()).unwrap();
    let first = std::fs::read(c.run_dir.join("report/summary.json")).unwrap();
    std::fs::remove_dir_all(c.run_dir.join("report")).unwrap();
    runner::report(&c.run_dir).unwrap();
    assert_eq!(std::fs::read(c.run_dir.join("report/summary.json")).unwrap(), first);
}

#[test]
fn existing_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (c, qs) = small_config(dir.path(), 4);
    let mock = MockBackend::new(confirmation_mock(&qs)).unwrap();
    runner::run(&c, &mock).unwrap();
    let err = runner::run(&c, &mock).unwrap_err();
    assert!(matches!(err, RunError::AlreadyExists(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn empty_selection_fails_before_any_backend_call() {
    let dir = tempfile::tempdir().unwrap();
    let (mut c, qs) = small_config(dir.path(), 4);
    c.questions = QuestionSample::First(0);
    let mock = MockBackend::new(confirmation_mock(&qs)).unwrap();
    let err = runner::run(&c, &mock).unwrap_err();
    assert!(matches!(err, RunError::EmptyDataset), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(mock.log().is_empty());
}

#[test]
fn resume_refuses_result_affecting_changes_but_allows_operational_ones() {
    let dir = tempfile::tempdir().unwrap();
    let (c, qs) = small_config(dir.path(), 4);
    let mock = MockBackend::new(confirmation_mock(&qs)).unwrap();
    runner::run(&c, &mock).unwrap();

    let mut changed = c.clone();
    changed.iterations = 5;
    changed.temperature = 0.5;
    match runner::resume(&c.run_dir, Some(&changed), &mock).unwrap_err() {
        RunError::ConfigMismatch(diff) => {
            assert_eq!(diff.len(), 2, "{diff:?}");
            assert!(diff.iter().any(|d| d.starts_with("iterations")));
        }
        other => panic!("unexpected {other}"),
    }

    let mut operational = c.clone();
    operational.max_in_flight = 32;
    operational.retries = 0;
    operational.run_dir = dir.path().join("elsewhere");
    runner::resume(&c.run_dir, Some(&operational), &mock).unwrap();
}

#[test]
fn resume_detects_a_changed_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (c, qs) = small_config(dir.path(), 4);
    let mock = MockBackend::new(confirmation_mock(&qs)).unwrap();
    runner::run(&c, &mock).unwrap();
    write_corpus(dir.path(), &corpus(5));
    let err = runner::resume(&c.run_dir, None, &mock).unwrap_err();
    assert!(matches!(err, RunError::DatasetChanged { .. }), "{err}");
}

#[test]
fn corruption_inside_the_trial_log_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (c, qs) = small_config(dir.path(), 4);
    let failing = FailAfter::new(MockBackend::new(confirmation_mock(&qs)).unwrap(), 130);
    assert!(runner::run(&c, &failing).is_err());
    let trials = c.run_dir.join(runner::TRIALS_FILE);
    let text = std::fs::read_to_string(&trials).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.insert(1, "{not json");
    std::fs::write(&trials, lines.join("\n") + "\n").unwrap();
    let err = runner::resume(&c.run_dir, None, &MockBackend::new(confirmation_mock(&qs)).unwrap()).unwrap_err();
    assert!(matches!(err, RunError::Store(_)), "{err}");
}

#[test]
fn backend_failure_during_brp_leaves_a_resumable_run() {
    let dir = tempfile::tempdir().unwrap();
    let (c, qs) = small_config(dir.path(), 4);
    let failing = FailAfter::new(MockBackend::new(confirmation_mock(&qs)).unwrap(), 10);
    let err = runner::run(&c, &failing).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(c.run_dir.join("brp.partial.json").exists());
    runner::resume(&c.run_dir, None, &MockBackend::new(confirmation_mock(&qs)).unwrap()).unwrap();
    assert!(runner::read_manifest(&c.run_dir).unwrap().brp.is_some());
}

#[test]
fn torn_results_tail_is_recomputed_from_stored_trials() {
    let dir = tempfile::tempdir().unwrap();
    let (c, qs) = small_config(dir.path(), 4);
    runner::run(&c, &MockBackend::new(confirmation_mock(&qs)).unwrap()).unwrap();
    let control = std::fs::read(c.run_dir.join("report/summary.json")).unwrap();

    // Drop the last result and leave half of it behind.
    let results = c.run_dir.join(runner::RESULTS_FILE);
    let text = std::fs::read_to_string(&results).unwrap();
    let cut = text.trim_end().rfind('\n').unwrap() + 1;
    let mut f = std::fs::File::create(&results).unwrap();
    f.write_all(&text.as_bytes()[..cut + 20]).unwrap();
    drop(f);

    let mock = MockBackend::new(confirmation_mock(&qs)).unwrap();
    let out = runner::resume(&c.run_dir, None, &mock).unwrap();
    assert_eq!(out.selections_new, 1);
    assert!(mock.log().is_empty(), "trials should be reused, not re-measured");
    assert_eq!(std::fs::read(c.run_dir.join("report/summary.json")).unwrap(), control);
}

#[test]
fn call_counts_for_small_runs() {
    let dir = tempfile::tempdir().unwrap();
    let questions = corpus(10);
    let data = write_corpus(dir.path(), &questions);

    let mut cf = run_config(&data, &dir.path().join("cf"), &[Method::Cf]);
    cf.permutations = PermutationPolicy::Identity;
    cf.brp.enabled = false;
    let mock = MockBackend::new(confirmation_mock(&questions)).unwrap();
    let out = runner::run(&cf, &mock).unwrap();
    assert_eq!((mock.score_count(), mock.generate_count(), out.selections_new), (40, 0, 10));

    let mut apricot = run_config(&data, &dir.path().join("apricot"), &[Method::Apricot]);
    apricot.permutations = PermutationPolicy::Identity;
    apricot.iterations = 2;
    apricot.questions = QuestionSample::First(5);
    apricot.brp.enabled = false;
    let mock = MockBackend::new(confirmation_mock(&questions)).unwrap();
    runner::run(&apricot, &mock).unwrap();
    assert_eq!((mock.generate_count(), mock.score_count()), (40, 40));
}
