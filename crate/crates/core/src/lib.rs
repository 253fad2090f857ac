//! Multiple-choice QA evaluation harness for answer-label base-rate bias.
//!
//! Measures how strongly a model's answer choices follow the base-rate
//! probability of the answer labels themselves, under four selection
//! methods: cloze scoring, counterfactual (CF) canary scoring, CF with an
//! unprimed chain of thought, and CF with per-option primed chains. Any
//! backend that scores continuations and samples text can be plugged in;
//! [`backend::MockBackend`] is a deterministic rule-driven stand-in.
//!
//! The statistics kernels in [`stats`] are generic over the float type; the
//! aliases below fix them to `f64`, the precision used on disk.

pub mod backend;
pub mod brp;
pub mod dataset;
pub mod label;
pub mod prompts;
pub mod runner;
pub mod seed;
pub mod selection;
pub mod stats;

pub use backend::{Backend, BackendError, CanaryRule, LeadingSpace, MockBackend, MockConfig};
pub use brp::{BrpEstimate, BrpMethod};
pub use dataset::{load_dataset, Dataset, DatasetFormat, Question};
pub use label::{enumerate_label_permutations, ChoiceLabel, LabelMap, LabelPermutation};
pub use selection::{Method, SelectionOptions, SelectionResult, TrialKey, TrialRecord};
pub use stats::{FlowTable, LabelDistribution};

/// Per-label probabilities.
pub type Probabilities = LabelMap<f64>;
pub type Correlation = stats::Correlation<f64>;
pub type AggregateStats = stats::AggregateStats<f64>;
pub type WilcoxonResult = stats::WilcoxonResult<f64>;
pub type WilcoxonOutcome = stats::WilcoxonOutcome<f64>;

pub type Correlation32 = stats::Correlation<f32>;
pub type AggregateStats32 = stats::AggregateStats<f32>;
pub type WilcoxonResult32 = stats::WilcoxonResult<f32>;

/// Harness version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
