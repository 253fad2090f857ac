//! Plain-text prompt templates.
//!
//! Layout is byte-exact: template rows are joined by a single `\n`, and a
//! blank line separates the question block from the trigger or query
//! section. A generated chain is followed by one `\n` and then the query.
//! No prompt ends in a newline except the generation contexts, which end
//! with `\n` so the chain starts on its own line.

use serde::{Deserialize, Serialize};

use crate::dataset::{permute_choices, Question};
use crate::label::{ChoiceLabel, LabelPermutation};

pub const HEADER: &str = "Below you will see a question and answer choices.";
pub const COT_TRIGGER: &str = "Let's think step by step.";
pub const CANARY: &str = "Yes";
pub const CLOZE_QUESTION: &str = "In conclusion, which choice do you believe is most correct?";
/// Ends in a space; the bare label is the continuation.
pub const CLOZE_STEM: &str = "I believe the correct answer is choice ";
pub const DEFAULT_FILLER_QUESTION: &str = "QUESTION";
pub const DEFAULT_FILLER_CHOICE: &str = "CHOICE";

const SECTION_BREAK: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Base,
    BaseCotTrigger,
    BaseApricotTrigger,
    BrpCloze,
    Cloze,
    CfQuery,
    PostChainQuery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub kind: PromptKind,
    pub option: Option<ChoiceLabel>,
}

impl RenderedPrompt {
    fn new(text: String, kind: PromptKind, option: Option<ChoiceLabel>) -> Self {
        RenderedPrompt { text, kind, option }
    }
}

fn question_block(question: &str, labelled: impl IntoIterator<Item = (ChoiceLabel, impl AsRef<str>)>) -> String {
    let mut text = String::with_capacity(256);
    text.push_str(HEADER);
    text.push('\n');
    text.push_str(question);
    for (label, choice) in labelled {
        text.push_str("\nchoice ");
        text.push(label.as_char());
        text.push_str(": ");
        text.push_str(choice.as_ref());
    }
    text
}

/// Header, question, and the four labelled choices in slot order.
pub fn render_base(q: &Question, perm: &LabelPermutation) -> RenderedPrompt {
    let text = question_block(&q.text, permute_choices(q, perm));
    RenderedPrompt::new(text, PromptKind::Base, None)
}

pub fn render_cot_trigger() -> &'static str {
    COT_TRIGGER
}

pub fn render_apricot_trigger(option: ChoiceLabel) -> String {
    format!("Let's evaluate choice {option} step by step.")
}

pub fn render_query(option: ChoiceLabel) -> String {
    format!("In conclusion, do you believe choice {option} is most correct?")
}

/// Context the unprimed chain is generated from.
pub fn render_cot_context(base: &RenderedPrompt) -> RenderedPrompt {
    let text = format!("{}{SECTION_BREAK}{COT_TRIGGER}\n", base.text);
    RenderedPrompt::new(text, PromptKind::BaseCotTrigger, None)
}

/// Context a chain primed on `option` is generated from.
pub fn render_apricot_context(base: &RenderedPrompt, option: ChoiceLabel) -> RenderedPrompt {
    let text = format!("{}{SECTION_BREAK}{}\n", base.text, render_apricot_trigger(option));
    RenderedPrompt::new(text, PromptKind::BaseApricotTrigger, Some(option))
}

/// Counterfactual context without reasoning: base, blank line, query.
pub fn render_cf_context(base: &RenderedPrompt, option: ChoiceLabel) -> RenderedPrompt {
    let text = format!("{}{SECTION_BREAK}{}", base.text, render_query(option));
    RenderedPrompt::new(text, PromptKind::CfQuery, Some(option))
}

/// Generation context, the chain verbatim, a newline, then the query.
pub fn render_post_chain_context(generation_context: &RenderedPrompt, chain: &str, option: ChoiceLabel) -> RenderedPrompt {
    let text = format!("{}{chain}\n{}", generation_context.text, render_query(option));
    RenderedPrompt::new(text, PromptKind::PostChainQuery, Some(option))
}

fn cloze_tail(block: String) -> String {
    format!("{block}{SECTION_BREAK}{CLOZE_QUESTION}\n{CLOZE_STEM}")
}

/// Task-time cloze context; ends with the stem awaiting a bare label.
pub fn render_cloze_context(q: &Question, perm: &LabelPermutation) -> RenderedPrompt {
    let text = cloze_tail(question_block(&q.text, permute_choices(q, perm)));
    RenderedPrompt::new(text, PromptKind::Cloze, None)
}

fn brp_block(perm: &LabelPermutation, filler_question: &str, filler_choice: &str) -> String {
    question_block(
        filler_question,
        perm.slot_to_label().map(|l| (l, filler_choice)),
    )
}

/// Placeholder prompt with four identical choices, used for base rates.
pub fn render_brp_cloze(perm: &LabelPermutation, filler_question: &str, filler_choice: &str) -> RenderedPrompt {
    let text = cloze_tail(brp_block(perm, filler_question, filler_choice));
    RenderedPrompt::new(text, PromptKind::BrpCloze, None)
}

/// Placeholder prompt followed by the counterfactual query for `option`.
pub fn render_brp_cf(
    perm: &LabelPermutation,
    filler_question: &str,
    filler_choice: &str,
    option: ChoiceLabel,
) -> RenderedPrompt {
    let text = format!(
        "{}{SECTION_BREAK}{}",
        brp_block(perm, filler_question, filler_choice),
        render_query(option)
    );
    RenderedPrompt::new(text, PromptKind::CfQuery, Some(option))
}
