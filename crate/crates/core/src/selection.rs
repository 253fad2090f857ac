//! Answer-selection engines.
//!
//! Every engine turns one (question, label ordering) pair into per-option
//! probabilities and picks the argmax, ties going to the earlier label:
//!
//! * cloze: probability of the bare label after a shared cloze stem;
//! * cf: probability of the canary word after one query per option;
//! * cf_cot: `K` unprimed chains generated once, each followed by every
//!   option's query; the option score is the mean over chains;
//! * apricot: `K` chains per option, each primed on that option and
//!   queried only for it.
//!
//! Engines emit one [`TrialRecord`] per scored (iteration, option) and can
//! reuse records from an earlier, interrupted run.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::{word_probability, Backend, BackendError, FinishReason, GenerateRequest, LeadingSpace};
use crate::dataset::Question;
use crate::label::{ChoiceLabel, LabelMap, LabelPermutation};
use crate::prompts::{self, RenderedPrompt, CANARY};
use crate::seed::trial_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cloze,
    Cf,
    CfCot,
    Apricot,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cloze, Method::Cf, Method::CfCot, Method::Apricot];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cloze => "cloze",
            Method::Cf => "cf",
            Method::CfCot => "cf_cot",
            Method::Apricot => "apricot",
        }
    }

    pub fn generates(self) -> bool {
        matches!(self, Method::CfCot | Method::Apricot)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected cloze, cf, cf_cot or apricot)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotChain {
    pub text: String,
    /// `None` for chains from the unprimed trigger.
    pub primed_option: Option<ChoiceLabel>,
    pub iteration: u32,
    pub finish_reason: FinishReason,
}

/// Identity of one measurement; unique within a run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrialKey {
    pub question_id: String,
    pub method: Method,
    pub perm_index: usize,
    pub iteration: u32,
    pub option: ChoiceLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub question_id: String,
    pub method: Method,
    pub perm_index: usize,
    pub iteration: u32,
    pub option: ChoiceLabel,
    pub canary_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<CotChain>,
}

impl TrialRecord {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            question_id: self.question_id.clone(),
            method: self.method,
            perm_index: self.perm_index,
            iteration: self.iteration,
            option: self.option,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub question_id: String,
    pub subject: String,
    pub method: Method,
    pub perm_index: usize,
    pub per_option_mean: LabelMap<f64>,
    pub chosen: ChoiceLabel,
    /// Gold label under this result's ordering.
    pub gold: ChoiceLabel,
    pub is_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    /// Chains per option (`K`); only the generating methods use it.
    pub iterations: u32,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub leading_space: LeadingSpace,
    pub base_seed: u64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            iterations: 10,
            max_new_tokens: 100,
            temperature: 1.0,
            leading_space: LeadingSpace::On,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectionError {
    #[error("invalid selection options: {0}")]
    InvalidOptions(String),
    #[error("{method} on question {question_id} (ordering {perm_index}): {source}")]
    Backend {
        question_id: String,
        method: Method,
        perm_index: usize,
        #[source]
        source: BackendError,
    },
}

/// Everything an engine needs besides the question itself.
pub struct Engine<'a> {
    backend: &'a dyn Backend,
    options: &'a SelectionOptions,
    prior: Option<&'a HashMap<TrialKey, TrialRecord>>,
    sink: Option<&'a (dyn Fn(&TrialRecord) + Sync)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub result: SelectionResult,
    /// All trials behind the result, reused ones included, ordered by
    /// (option, iteration).
    pub trials: Vec<TrialRecord>,
}

impl<'a> Engine<'a> {
    pub fn new(backend: &'a dyn Backend, options: &'a SelectionOptions) -> Self {
        Engine {
            backend,
            options,
            prior: None,
            sink: None,
        }
    }

    /// Trials found here are reused instead of re-measured.
    pub fn with_prior(mut self, prior: &'a HashMap<TrialKey, TrialRecord>) -> Self {
        self.prior = Some(prior);
        self
    }

    /// Called once for every newly measured trial, as soon as it exists.
    pub fn with_sink(mut self, sink: &'a (dyn Fn(&TrialRecord) + Sync)) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn select(&self, method: Method, q: &Question, perm: &LabelPermutation) -> Result<Selection, SelectionError> {
        if method.generates() && self.options.iterations == 0 {
            return Err(SelectionError::InvalidOptions("iterations must be at least 1".into()));
        }
        if method.generates() && self.options.max_new_tokens == 0 {
            return Err(SelectionError::InvalidOptions("max_new_tokens must be at least 1".into()));
        }
        let mut run = Trials {
            engine: self,
            q,
            perm,
            method,
            trials: Vec::new(),
        };
        match method {
            Method::Cloze => run.cloze(),
            Method::Cf => run.cf(),
            Method::CfCot => run.cf_cot(),
            Method::Apricot => run.apricot(),
        }
        .map_err(|source| SelectionError::Backend {
            question_id: q.id.clone(),
            method,
            perm_index: perm.index(),
            source,
        })?;
        Ok(run.finish())
    }
}

struct Trials<'e, 'a> {
    engine: &'e Engine<'a>,
    q: &'e Question,
    perm: &'e LabelPermutation,
    method: Method,
    trials: Vec<TrialRecord>,
}

impl Trials<'_, '_> {
    fn key(&self, iteration: u32, option: ChoiceLabel) -> TrialKey {
        TrialKey {
            question_id: self.q.id.clone(),
            method: self.method,
            perm_index: self.perm.index(),
            iteration,
            option,
        }
    }

    fn prior(&self, iteration: u32, option: ChoiceLabel) -> Option<&TrialRecord> {
        self.engine.prior?.get(&self.key(iteration, option))
    }

    fn push(&mut self, record: TrialRecord, fresh: bool) {
        if fresh {
            if let Some(sink) = self.engine.sink {
                sink(&record);
            }
        }
        self.trials.push(record);
    }

    /// Pushes the prior record for this trial if one exists.
    fn reuse(&mut self, iteration: u32, option: ChoiceLabel) -> bool {
        match self.prior(iteration, option).cloned() {
            Some(prior) => {
                self.push(prior, false);
                true
            }
            None => false,
        }
    }

    fn record(&mut self, iteration: u32, option: ChoiceLabel, canary_prob: f64, chain: Option<CotChain>) {
        let record = TrialRecord {
            question_id: self.q.id.clone(),
            method: self.method,
            perm_index: self.perm.index(),
            iteration,
            option,
            canary_prob,
            chain,
        };
        self.push(record, true);
    }

    fn canary(&self, context: &RenderedPrompt) -> Result<f64, BackendError> {
        word_probability(self.engine.backend, &context.text, CANARY, self.engine.options.leading_space)
    }

    fn generate(&self, context: &RenderedPrompt, iteration: u32, primed: Option<ChoiceLabel>) -> Result<CotChain, BackendError> {
        let opts = self.engine.options;
        let seed = trial_seed(
            opts.base_seed,
            &self.q.id,
            self.method.as_str(),
            self.perm.index(),
            iteration,
            primed.map(ChoiceLabel::as_char),
        );
        let resp = self.engine.backend.generate(&GenerateRequest {
            context: context.text.clone(),
            max_new_tokens: opts.max_new_tokens,
            temperature: opts.temperature,
            seed,
            stop: Vec::new(),
        })?;
        Ok(CotChain {
            text: resp.text,
            primed_option: primed,
            iteration,
            finish_reason: resp.finish_reason,
        })
    }

    fn cloze(&mut self) -> Result<(), BackendError> {
        let context = prompts::render_cloze_context(self.q, self.perm);
        for label in ChoiceLabel::ALL {
            if self.reuse(1, label) {
                continue;
            }
            let p = word_probability(
                self.engine.backend,
                &context.text,
                label.as_str(),
                self.engine.options.leading_space,
            )?;
            self.record(1, label, p, None);
        }
        Ok(())
    }

    fn cf(&mut self) -> Result<(), BackendError> {
        let base = prompts::render_base(self.q, self.perm);
        for label in ChoiceLabel::ALL {
            if self.reuse(1, label) {
                continue;
            }
            let p = self.canary(&prompts::render_cf_context(&base, label))?;
            self.record(1, label, p, None);
        }
        Ok(())
    }

    fn cf_cot(&mut self) -> Result<(), BackendError> {
        let base = prompts::render_base(self.q, self.perm);
        let gen_context = prompts::render_cot_context(&base);
        let k = self.engine.options.iterations;
        // All chains exist before any option is queried; one chain serves
        // every option of its iteration.
        let mut chains = Vec::with_capacity(k as usize);
        for i in 1..=k {
            let reused = ChoiceLabel::ALL
                .iter()
                .find_map(|l| self.prior(i, *l).and_then(|r| r.chain.clone()));
            let chain = match reused {
                Some(c) => c,
                None => self.generate(&gen_context, i, None)?,
            };
            chains.push(chain);
        }
        for label in ChoiceLabel::ALL {
            for chain in &chains {
                if self.reuse(chain.iteration, label) {
                    continue;
                }
                let context = prompts::render_post_chain_context(&gen_context, &chain.text, label);
                let p = self.canary(&context)?;
                self.record(chain.iteration, label, p, Some(chain.clone()));
            }
        }
        Ok(())
    }

    fn apricot(&mut self) -> Result<(), BackendError> {
        let base = prompts::render_base(self.q, self.perm);
        let k = self.engine.options.iterations;
        for label in ChoiceLabel::ALL {
            let gen_context = prompts::render_apricot_context(&base, label);
            for i in 1..=k {
                if self.reuse(i, label) {
                    continue;
                }
                let chain = self.generate(&gen_context, i, Some(label))?;
                let context = prompts::render_post_chain_context(&gen_context, &chain.text, label);
                let p = self.canary(&context)?;
                self.record(i, label, p, Some(chain));
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Selection {
        self.trials.sort_by_key(|t| (t.option, t.iteration));
        let per_option_mean = LabelMap::from_fn(|label| {
            let ps: Vec<f64> = self
                .trials
                .iter()
                .filter(|t| t.option == label)
                .map(|t| t.canary_prob)
                .collect();
            ps.iter().sum::<f64>() / ps.len() as f64
        });
        let chosen = per_option_mean.argmax();
        let gold = self.q.gold_label(self.perm);
        Selection {
            result: SelectionResult {
                question_id: self.q.id.clone(),
                subject: self.q.subject.clone(),
                method: self.method,
                perm_index: self.perm.index(),
                per_option_mean,
                chosen,
                gold,
                is_correct: chosen == gold,
            },
            trials: self.trials,
        }
    }
}

pub fn select_cloze(
    q: &Question,
    perm: &LabelPermutation,
    backend: &dyn Backend,
    options: &SelectionOptions,
) -> Result<SelectionResult, SelectionError> {
    Engine::new(backend, options).select(Method::Cloze, q, perm).map(|s| s.result)
}

pub fn select_cf(
    q: &Question,
    perm: &LabelPermutation,
    backend: &dyn Backend,
    options: &SelectionOptions,
) -> Result<SelectionResult, SelectionError> {
    Engine::new(backend, options).select(Method::Cf, q, perm).map(|s| s.result)
}

pub fn select_cf_cot(
    q: &Question,
    perm: &LabelPermutation,
    backend: &dyn Backend,
    options: &SelectionOptions,
) -> Result<SelectionResult, SelectionError> {
    Engine::new(backend, options).select(Method::CfCot, q, perm).map(|s| s.result)
}

pub fn select_apricot(
    q: &Question,
    perm: &LabelPermutation,
    backend: &dyn Backend,
    options: &SelectionOptions,
) -> Result<SelectionResult, SelectionError> {
    Engine::new(backend, options).select(Method::Apricot, q, perm).map(|s| s.result)
}
