//! Deterministic rule-driven backend.
//!
//! The mock reads the prompt layout produced by [`crate::prompts`] back out
//! of each context (choice lines, trigger, chain, final query) and answers
//! from its configuration. Every response is a pure function of the request
//! and the config; the request log is the only mutable state.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    Backend, BackendError, FinishReason, GenerateRequest, GenerateResponse, ScoreRequest, ScoreResponse,
    TokenLogprob,
};
use crate::label::{ChoiceLabel, LabelMap};
use crate::prompts::{COT_TRIGGER, HEADER};
use crate::seed::stable_hash;

/// Canary probability assigned when every condition holds. Patterns in
/// `context_contains` and `chain_contains` may use `{label}` and `{text}`,
/// which expand to the queried label and its choice text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryRule {
    #[serde(default)]
    pub label: Option<ChoiceLabel>,
    #[serde(default)]
    pub query_text_contains: Option<String>,
    #[serde(default)]
    pub context_contains: Vec<String>,
    #[serde(default)]
    pub chain_contains: Vec<String>,
    pub prob: f64,
}

impl CanaryRule {
    pub fn for_label(label: ChoiceLabel, prob: f64) -> Self {
        CanaryRule {
            label: Some(label),
            query_text_contains: None,
            context_contains: Vec::new(),
            chain_contains: Vec::new(),
            prob,
        }
    }

    pub fn for_query_text(needle: impl Into<String>, prob: f64) -> Self {
        CanaryRule {
            label: None,
            query_text_contains: Some(needle.into()),
            context_contains: Vec::new(),
            chain_contains: Vec::new(),
            prob,
        }
    }

    pub fn for_chain(pattern: impl Into<String>, prob: f64) -> Self {
        CanaryRule {
            label: None,
            query_text_contains: None,
            context_contains: Vec::new(),
            chain_contains: vec![pattern.into()],
            prob,
        }
    }
}

/// "Reasoning" the mock emits. Placeholders: `{label}` and `{text}` (the
/// primed label and its choice text; empty for unprimed chains) and
/// `{question}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTemplates {
    #[serde(default)]
    pub unprimed: Vec<String>,
    #[serde(default)]
    pub primed: Vec<String>,
}

impl Default for ChainTemplates {
    fn default() -> Self {
        ChainTemplates {
            unprimed: vec!["Each choice needs to be checked against the question before answering.".into()],
            primed: vec!["Checking choice {label}: {text}.".into()],
        }
    }
}

/// Probability boost for the choice whose text equals `answer` on the
/// question whose text equals `question`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knowledge {
    pub question: String,
    pub answer: String,
    pub boost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    /// Probability of a bare label continuing a cloze stem.
    pub label_brp: LabelMap<f64>,
    pub canary_word: String,
    /// First matching rule wins.
    pub canary_table: Vec<CanaryRule>,
    pub default_canary: f64,
    pub chain_templates: ChainTemplates,
    pub per_question_knowledge: Vec<Knowledge>,
    pub base_seed: u64,
    /// Contexts longer than this many bytes are rejected as overflow.
    pub max_context_bytes: Option<usize>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            label_brp: LabelMap([0.25; 4]),
            canary_word: "Yes".into(),
            canary_table: Vec::new(),
            default_canary: 0.1,
            chain_templates: ChainTemplates::default(),
            per_question_knowledge: Vec::new(),
            base_seed: 0,
            max_context_bytes: None,
        }
    }
}

impl MockConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |what: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(format!("{what} = {p} is not a probability"))
            }
        };
        for (label, p) in self.label_brp.iter() {
            unit(&format!("label_brp[{label}]"), *p)?;
        }
        unit("default_canary", self.default_canary)?;
        for (i, rule) in self.canary_table.iter().enumerate() {
            unit(&format!("canary_table[{i}].prob"), rule.prob)?;
        }
        for (i, k) in self.per_question_knowledge.iter().enumerate() {
            unit(&format!("per_question_knowledge[{i}].boost"), k.boost)?;
        }
        if self.canary_word.trim().is_empty() {
            return Err("canary_word must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoggedRequest {
    Score(ScoreRequest),
    Generate(GenerateRequest),
}

#[derive(Debug)]
pub struct MockBackend {
    config: MockConfig,
    log: Mutex<Vec<LoggedRequest>>,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Result<Self, String> {
        config.validate()?;
        Ok(MockBackend {
            config,
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    pub fn log(&self) -> Vec<LoggedRequest> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn take_log(&self) -> Vec<LoggedRequest> {
        std::mem::take(&mut *self.log.lock().expect("log lock"))
    }

    pub fn score_count(&self) -> usize {
        self.log
            .lock()
            .expect("log lock")
            .iter()
            .filter(|r| matches!(r, LoggedRequest::Score(_)))
            .count()
    }

    pub fn generate_count(&self) -> usize {
        self.log
            .lock()
            .expect("log lock")
            .iter()
            .filter(|r| matches!(r, LoggedRequest::Generate(_)))
            .count()
    }

    fn record(&self, req: LoggedRequest) {
        self.log.lock().expect("log lock").push(req);
    }

    fn check_length(&self, context: &str) -> Result<(), BackendError> {
        match self.config.max_context_bytes {
            Some(max) if context.len() > max => Err(BackendError::ContextOverflow(format!(
                "context of {} bytes exceeds {max}",
                context.len()
            ))),
            _ => Ok(()),
        }
    }

    fn knowledge_boost(&self, parsed: &ParsedContext<'_>, label: ChoiceLabel) -> f64 {
        let (Some(question), Some(text)) = (parsed.question, parsed.choices[label]) else {
            return 0.0;
        };
        self.config
            .per_question_knowledge
            .iter()
            .filter(|k| k.question == question && k.answer == text)
            .map(|k| k.boost)
            .sum()
    }

    fn canary_probability(&self, parsed: &ParsedContext<'_>, context: &str, query: ChoiceLabel) -> f64 {
        let text = parsed.choices[query].unwrap_or("");
        let expand = |pattern: &str| pattern.replace("{label}", query.as_str()).replace("{text}", text);
        let matched = self.config.canary_table.iter().find(|rule| {
            rule.label.is_none_or(|l| l == query)
                && rule
                    .query_text_contains
                    .as_deref()
                    .is_none_or(|needle| text.contains(needle))
                && rule.context_contains.iter().all(|p| context.contains(&expand(p)))
                && rule.chain_contains.iter().all(|p| parsed.chain.contains(&expand(p)))
        });
        let base = matched.map_or(self.config.default_canary, |r| r.prob);
        base + self.knowledge_boost(parsed, query)
    }

    /// Probability for continuations the rules know about, else `None`.
    fn rule_probability(&self, req: &ScoreRequest) -> Option<f64> {
        let word = req.continuation.trim_start();
        let parsed = ParsedContext::parse(&req.context);
        if let Ok(label) = word.parse::<ChoiceLabel>() {
            if word.len() == 1 && req.context.trim_end().ends_with("choice") {
                return Some(self.config.label_brp[label] + self.knowledge_boost(&parsed, label));
            }
        }
        if word == self.config.canary_word {
            if let Some(query) = parsed.query {
                return Some(self.canary_probability(&parsed, &req.context, query));
            }
        }
        None
    }
}

impl Backend for MockBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.record(LoggedRequest::Score(req.clone()));
        req.validate()?;
        self.check_length(&req.context)?;
        if let Some(p) = self.rule_probability(req) {
            let p = p.clamp(0.0, 1.0);
            return Ok(ScoreResponse::from_pieces(vec![TokenLogprob {
                text: req.continuation.clone(),
                logprob: p.ln(),
            }]));
        }
        let pieces = split_tokens(&req.continuation)
            .into_iter()
            .map(|tok| {
                let h = stable_hash([
                    &self.config.base_seed.to_le_bytes()[..],
                    req.context.as_bytes(),
                    tok.as_bytes(),
                ]);
                TokenLogprob {
                    text: tok.to_string(),
                    logprob: -1.0 - (h % 1000) as f64 / 250.0,
                }
            })
            .collect();
        Ok(ScoreResponse::from_pieces(pieces))
    }

    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        self.record(LoggedRequest::Generate(req.clone()));
        req.validate()?;
        self.check_length(&req.context)?;
        let parsed = ParsedContext::parse(&req.context);
        let templates = &self.config.chain_templates;
        let pool = match parsed.primed {
            Some(_) if !templates.primed.is_empty() => &templates.primed,
            _ => &templates.unprimed,
        };
        let template = if pool.is_empty() {
            ""
        } else if req.temperature == 0.0 {
            &pool[0]
        } else {
            let h = stable_hash([
                &self.config.base_seed.to_le_bytes()[..],
                &req.seed.to_le_bytes()[..],
                req.context.as_bytes(),
            ]);
            &pool[(h % pool.len() as u64) as usize]
        };
        let (label, text) = match parsed.primed {
            Some(l) => (l.as_str(), parsed.choices[l].unwrap_or("")),
            None => ("", ""),
        };
        let full = template
            .replace("{label}", label)
            .replace("{text}", text)
            .replace("{question}", parsed.question.unwrap_or(""));

        let mut finish = if full.is_empty() {
            FinishReason::End
        } else {
            FinishReason::Stop
        };
        let mut body = full.as_str();
        if let Some(cut) = req.stop.iter().filter_map(|s| body.find(s.as_str())).min() {
            body = &body[..cut];
            finish = FinishReason::Stop;
        }
        let tokens = split_tokens(body);
        let text = if tokens.len() > req.max_new_tokens as usize {
            finish = FinishReason::Length;
            tokens[..req.max_new_tokens as usize].concat()
        } else {
            body.to_string()
        };
        Ok(GenerateResponse {
            text,
            finish_reason: finish,
        })
    }
}

/// Whitespace-led word pieces: `"a b  c"` → `["a", " b", "  c"]`.
pub fn split_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Pieces of a harness prompt recovered from its text.
#[derive(Debug, Default)]
struct ParsedContext<'a> {
    question: Option<&'a str>,
    choices: LabelMap<Option<&'a str>>,
    primed: Option<ChoiceLabel>,
    chain: &'a str,
    query: Option<ChoiceLabel>,
}

const APRICOT_PREFIX: &str = "Let's evaluate choice ";
const QUERY_PREFIX: &str = "In conclusion, do you believe choice ";
const QUERY_SUFFIX: &str = " is most correct?";

impl<'a> ParsedContext<'a> {
    fn parse(context: &'a str) -> Self {
        let mut parsed = ParsedContext::default();
        let block = context.split("\n\n").next().unwrap_or("");
        let mut lines = block.lines();
        if lines.next() == Some(HEADER) {
            parsed.question = lines.next();
        }
        for line in block.lines() {
            if let Some(rest) = line.strip_prefix("choice ") {
                if let Some((label, text)) = rest.split_once(": ") {
                    if let Ok(label) = label.parse::<ChoiceLabel>() {
                        parsed.choices[label] = Some(text);
                    }
                }
            }
        }

        let query_start = context.trim_end().strip_suffix(QUERY_SUFFIX).and_then(|head| {
            let at = head.rfind(QUERY_PREFIX)?;
            let label = head[at + QUERY_PREFIX.len()..].parse::<ChoiceLabel>().ok()?;
            parsed.query = Some(label);
            Some(at)
        });

        let trigger_end = if let Some(at) = context.find(&format!("\n\n{COT_TRIGGER}\n")) {
            Some(at + COT_TRIGGER.len() + 3)
        } else if let Some(at) = context.find(&format!("\n\n{APRICOT_PREFIX}")) {
            let rest = &context[at + 2 + APRICOT_PREFIX.len()..];
            parsed.primed = rest.get(..1).and_then(|l| l.parse().ok());
            rest.find('\n').map(|nl| context.len() - rest.len() + nl + 1)
        } else {
            None
        };
        if let Some(start) = trigger_end {
            let end = query_start.unwrap_or(context.len()).max(start);
            parsed.chain = context[start..end].trim_end_matches('\n');
        }
        parsed
    }
}
