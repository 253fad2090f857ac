//! Answer-label base-rate probabilities.
//!
//! The placeholder prompt has four identical choices, so any difference
//! between label probabilities is a preference for the label itself. Each
//! label's base rate is the plain mean of its raw (unnormalized)
//! probability over the label orderings measured.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{word_probability, Backend, BackendError, LeadingSpace};
use crate::label::{ChoiceLabel, LabelMap, LabelPermutation};
use crate::prompts::{self, CANARY, DEFAULT_FILLER_CHOICE, DEFAULT_FILLER_QUESTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrpMethod {
    /// Bare label after the cloze stem.
    Cloze,
    /// Canary word after the per-label query.
    Cf,
}

impl std::str::FromStr for BrpMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cloze" => Ok(BrpMethod::Cloze),
            "cf" => Ok(BrpMethod::Cf),
            other => Err(format!("unknown BRP method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingProbabilities {
    pub perm_index: usize,
    /// Slot labels, e.g. `"DCBA"`.
    pub labels: String,
    pub probs: LabelMap<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrpEstimate {
    pub method: BrpMethod,
    /// Sorted by permutation index.
    pub per_ordering: Vec<OrderingProbabilities>,
    pub mean: LabelMap<f64>,
}

impl BrpEstimate {
    /// Builds the estimate from raw measurements in any order.
    pub fn from_measurements(method: BrpMethod, measured: impl IntoIterator<Item = (LabelPermutation, LabelMap<f64>)>) -> Self {
        let by_index: BTreeMap<usize, (LabelPermutation, LabelMap<f64>)> =
            measured.into_iter().map(|(p, m)| (p.index(), (p, m))).collect();
        let per_ordering: Vec<_> = by_index
            .values()
            .map(|(perm, probs)| OrderingProbabilities {
                perm_index: perm.index(),
                labels: perm.to_string(),
                probs: *probs,
            })
            .collect();
        let n = per_ordering.len() as f64;
        let mean = LabelMap::from_fn(|l| per_ordering.iter().map(|o| o.probs[l]).sum::<f64>() / n);
        BrpEstimate {
            method,
            per_ordering,
            mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrpOptions {
    pub filler_question: String,
    pub filler_choice: String,
    pub leading_space: LeadingSpace,
}

impl Default for BrpOptions {
    fn default() -> Self {
        BrpOptions {
            filler_question: DEFAULT_FILLER_QUESTION.into(),
            filler_choice: DEFAULT_FILLER_CHOICE.into(),
            leading_space: LeadingSpace::On,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BrpError {
    #[error("no label orderings given")]
    NoPermutations,
    #[error("label ordering {0} given twice")]
    DuplicatePermutation(usize),
    #[error("fillers must be non-empty")]
    EmptyFiller,
    #[error("backend failed after {} complete orderings: {source}", partial.len())]
    Backend {
        /// Orderings fully measured before the failure.
        partial: Vec<OrderingProbabilities>,
        #[source]
        source: BackendError,
    },
}

fn estimate(
    backend: &dyn Backend,
    perms: &[LabelPermutation],
    options: &BrpOptions,
    method: BrpMethod,
) -> Result<BrpEstimate, BrpError> {
    if perms.is_empty() {
        return Err(BrpError::NoPermutations);
    }
    if options.filler_question.is_empty() || options.filler_choice.is_empty() {
        return Err(BrpError::EmptyFiller);
    }
    let mut seen = [false; crate::label::PERMUTATION_COUNT];
    for p in perms {
        if std::mem::replace(&mut seen[p.index()], true) {
            return Err(BrpError::DuplicatePermutation(p.index()));
        }
    }
    let (fq, fc) = (options.filler_question.as_str(), options.filler_choice.as_str());
    let mut measured: Vec<(LabelPermutation, LabelMap<f64>)> = Vec::with_capacity(perms.len());
    for perm in perms {
        let mut probs = LabelMap([0.0; 4]);
        for label in ChoiceLabel::ALL {
            let p = match method {
                BrpMethod::Cloze => {
                    let ctx = prompts::render_brp_cloze(perm, fq, fc);
                    word_probability(backend, &ctx.text, label.as_str(), options.leading_space)
                }
                BrpMethod::Cf => {
                    let ctx = prompts::render_brp_cf(perm, fq, fc, label);
                    word_probability(backend, &ctx.text, CANARY, options.leading_space)
                }
            };
            match p {
                Ok(p) => probs[label] = p,
                Err(source) => {
                    let partial = BrpEstimate::from_measurements(method, measured).per_ordering;
                    return Err(BrpError::Backend { partial, source });
                }
            }
        }
        measured.push((*perm, probs));
    }
    Ok(BrpEstimate::from_measurements(method, measured))
}

/// Cloze base rates: each bare label scored after the placeholder stem.
pub fn estimate_cloze_brp(
    backend: &dyn Backend,
    perms: &[LabelPermutation],
    options: &BrpOptions,
) -> Result<BrpEstimate, BrpError> {
    estimate(backend, perms, options, BrpMethod::Cloze)
}

/// Counterfactual base rates: canary probability after each label's query
/// on the placeholder prompt.
pub fn estimate_cf_brp(
    backend: &dyn Backend,
    perms: &[LabelPermutation],
    options: &BrpOptions,
) -> Result<BrpEstimate, BrpError> {
    estimate(backend, perms, options, BrpMethod::Cf)
}

pub fn estimate_brp(
    backend: &dyn Backend,
    perms: &[LabelPermutation],
    options: &BrpOptions,
    method: BrpMethod,
) -> Result<BrpEstimate, BrpError> {
    estimate(backend, perms, options, method)
}
