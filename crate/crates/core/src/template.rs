//! Chat/memorization templates: token sequences with per-position loss
//! masks.
//!
//! Memorization prompts wrap the text in an assistant-role header and end
//! with an unmasked end-of-text token; the header control tokens are
//! masked out of the loss. Inference prompts are user-role with an open
//! assistant header at the end and are never trained on.

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocabulary, ASSISTANT, BOS, EOT, HDR_CLOSE, HDR_OPEN, USER};

pub const ANSWER_PREFIX: &str = "The answer is:";

pub const QA_INSTRUCTION: &str = "Please extract from the reference the span that best answers \
the question and provide the answer in the following format: \"The answer is: ...\".";

pub const CHOICE_INSTRUCTION: &str = "Please choose the candidate that best fits the instructions \
and provide the answer in the following format: \"The answer is: ...\".";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Memorization,
    Inference,
}

/// How much of the prompt is folded into the memorization text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemorizationStyle {
    /// Only the reference text is memorized.
    ReferenceOnly,
    /// The output-format instruction is embedded before the reference, to
    /// reinforce the output structure as well as the content.
    InstructionAndReference,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InferenceTask {
    Qa,
    Choice { candidates: String },
    Summary,
}

/// A rendered prompt: token ids plus a per-position loss mask.
///
/// `loss_mask[t]` says whether token `t` is scored as a prediction target;
/// predictions are read from the logits at position `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedPrompt {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub role: Role,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of scored target positions (excludes position 0, which has
    /// no preceding context).
    pub fn unmasked_targets(&self) -> usize {
        self.loss_mask.iter().enumerate().filter(|&(t, &m)| m && t > 0).count()
    }
}

fn check_window(len: usize, context_window: usize) -> Result<()> {
    if len > context_window {
        return Err(Error::ContextOverflow { needed: len, window: context_window });
    }
    Ok(())
}

/// Renders the memorization prompt: assistant header, content, end-of-text.
///
/// Control tokens are masked from the loss except the trailing end-of-text
/// token, which is always scored so that adapted models still stop.
pub fn render_memorization(
    vocab: &Vocabulary,
    text: &str,
    style: MemorizationStyle,
    context_window: usize,
) -> Result<TokenizedPrompt> {
    if text.is_empty() {
        return Err(Error::invalid("empty memorization text"));
    }
    let content = match style {
        MemorizationStyle::ReferenceOnly => format!("\n{text}"),
        MemorizationStyle::InstructionAndReference => {
            format!("\n{QA_INSTRUCTION}\nReference: {text}")
        }
    };
    let mut tokens = vec![HDR_OPEN, ASSISTANT, HDR_CLOSE];
    let mut loss_mask = vec![false; 3];
    let content_ids = vocab.encode(&content);
    loss_mask.extend(std::iter::repeat(true).take(content_ids.len()));
    tokens.extend(content_ids);
    tokens.push(EOT);
    loss_mask.push(true);
    check_window(tokens.len(), context_window)?;
    Ok(TokenizedPrompt { tokens, loss_mask, role: Role::Memorization })
}

fn inference_body(reference: &str, question: &str, task: &InferenceTask) -> Result<String> {
    if reference.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    match task {
        InferenceTask::Qa => {
            if question.is_empty() {
                return Err(Error::invalid("empty question"));
            }
            Ok(format!("\n{QA_INSTRUCTION}\nReference: {reference}\nQuestion: {question}"))
        }
        InferenceTask::Choice { candidates } => {
            if question.is_empty() || candidates.is_empty() {
                return Err(Error::invalid("empty question or candidates"));
            }
            Ok(format!(
                "\n{CHOICE_INSTRUCTION}\nReference: {reference}\nQuestion: {question}\nCandidates: {candidates}"
            ))
        }
        InferenceTask::Summary => {
            Ok(format!("\nReference: {reference}\nSummarize the above article in 1 sentence."))
        }
    }
}

/// Renders the user-role inference prompt, ending with an open assistant
/// header. The loss mask is all-false: inference prompts are never trained
/// on.
pub fn render_inference(
    vocab: &Vocabulary,
    reference: &str,
    question: &str,
    task: &InferenceTask,
    context_window: usize,
) -> Result<TokenizedPrompt> {
    let body = inference_body(reference, question, task)?;
    let mut tokens = vec![BOS, HDR_OPEN, USER, HDR_CLOSE];
    tokens.extend(vocab.encode(&body));
    tokens.extend([EOT, HDR_OPEN, ASSISTANT, HDR_CLOSE]);
    let loss_mask = vec![false; tokens.len()];
    check_window(tokens.len(), context_window)?;
    Ok(TokenizedPrompt { tokens, loss_mask, role: Role::Inference })
}

/// Inference prompt plus a gold assistant response; only the response
/// tokens (and the closing end-of-text) are unmasked. Used for
/// instruction tuning.
pub fn render_supervised(
    vocab: &Vocabulary,
    reference: &str,
    question: &str,
    task: &InferenceTask,
    answer: &str,
    context_window: usize,
) -> Result<TokenizedPrompt> {
    let prompt = render_inference(vocab, reference, question, task, context_window)?;
    let mut tokens = prompt.tokens;
    let mut loss_mask = prompt.loss_mask;
    let response_ids = vocab.encode(&format!("\n{ANSWER_PREFIX} {answer}."));
    loss_mask.extend(std::iter::repeat(true).take(response_ids.len()));
    tokens.extend(response_ids);
    tokens.push(EOT);
    loss_mask.push(true);
    check_window(tokens.len(), context_window)?;
    Ok(TokenizedPrompt { tokens, loss_mask, role: Role::Inference })
}
