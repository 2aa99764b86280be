//! Prompt assembly: schema realization, gold placement, budget enforcement and
//! noise padding.
//!
//! Rendered layout:
//!
//! ```text
//! <instruction>
//!
//! Documents:
//! Document [1] (Title: <title>) <text>
//! Document [2] (Title: <title>) <text>
//!
//! Question: <question>
//! Answer:
//! ```

mod noise;
mod schema;
mod tokens;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, QueryRecord};
use crate::taxonomy::DocLabel;

pub use noise::{
    nonsense_passage, pad_with_random, sample_random, NoiseKind, NoisePools, NoiseSource,
    NoiseStream, PadLayout, PoolSampler,
};
pub use schema::{PromptSchema, SlotClass};
pub use tokens::{count_tokens, TokenCountError, TokenCounter, WordRatioCounter};

pub const DEFAULT_INSTRUCTION: &str = "You are given a question and you must respond based on the provided documents. Respond with no more than five tokens.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("instruction and query alone need {needed} tokens, budget is {budget}")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("requested {requested} random passages but only {available} are available")]
    InsufficientPool { requested: usize, available: usize },
    #[error("nonsense lexicon is empty")]
    EmptyLexicon,
    #[error("nonsense passages need at least one word")]
    ZeroWords,
    #[error("alternate-corpus noise requested but no alternate corpus is loaded")]
    MissingAlternateCorpus,
    #[error(transparent)]
    TokenCount(#[from] TokenCountError),
}

/// A passage in the prompt context together with its type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDoc {
    pub passage: Passage,
    pub label: DocLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldPosition {
    Near,
    Mid,
    Far,
}

impl GoldPosition {
    pub const ALL: [GoldPosition; 3] = [GoldPosition::Near, GoldPosition::Mid, GoldPosition::Far];

    pub fn as_str(self) -> &'static str {
        match self {
            GoldPosition::Near => "near",
            GoldPosition::Mid => "mid",
            GoldPosition::Far => "far",
        }
    }
}

impl fmt::Display for GoldPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GoldPosition {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "near" => Ok(GoldPosition::Near),
            "mid" => Ok(GoldPosition::Mid),
            "far" => Ok(GoldPosition::Far),
            other => Err(PromptError::Schema(format!(
                "unknown gold position {other:?}"
            ))),
        }
    }
}

/// Inserts `gold` into `context`: last for near, first for far, at index
/// `floor(n/2)` of the resulting list for mid. Other items keep their order.
pub fn place_gold<T>(mut context: Vec<T>, gold: T, position: GoldPosition) -> Vec<T> {
    let at = match position {
        GoldPosition::Near => context.len(),
        GoldPosition::Far => 0,
        GoldPosition::Mid => context.len() / 2,
    };
    context.insert(at, gold);
    context
}

/// A budgeted prompt ready to render.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub instruction: String,
    pub context: Vec<ContextDoc>,
    pub question: String,
    pub token_count: usize,
    pub budget: usize,
    /// Documents removed to satisfy the budget.
    #[serde(default)]
    pub dropped: usize,
}

impl PromptPlan {
    pub fn render(&self) -> String {
        render_prompt(&self.instruction, &self.context, &self.question)
    }
}

pub fn render_prompt(instruction: &str, context: &[ContextDoc], question: &str) -> String {
    let mut out = String::with_capacity(
        instruction.len()
            + question.len()
            + 64
            + context
                .iter()
                .map(|d| d.passage.text.len() + 32)
                .sum::<usize>(),
    );
    out.push_str(instruction);
    out.push_str("\n\nDocuments:\n");
    for (i, doc) in context.iter().enumerate() {
        let _ = writeln!(
            out,
            "Document [{}] (Title: {}) {}",
            i + 1,
            doc.passage.title,
            doc.passage.text
        );
    }
    out.push_str("\nQuestion: ");
    out.push_str(question);
    out.push_str("\nAnswer:");
    out
}

/// Budgets an explicitly ordered context. Whole documents are dropped from the
/// front (farthest from the query) until the rendered prompt fits.
pub fn compose_ordered(
    instruction: &str,
    question: &str,
    context: Vec<ContextDoc>,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<PromptPlan, PromptError> {
    let bare = counter.count(&render_prompt(instruction, &[], question))?;
    if bare > budget {
        return Err(PromptError::BudgetTooSmall {
            needed: bare,
            budget,
        });
    }
    let mut start = 0;
    let token_count = loop {
        let tokens = counter.count(&render_prompt(instruction, &context[start..], question))?;
        if tokens <= budget {
            break tokens;
        }
        start += 1;
    };
    if start > 0 {
        tracing::debug!(dropped = start, budget, "context truncated to fit budget");
    }
    Ok(PromptPlan {
        instruction: instruction.to_string(),
        context: context[start..].to_vec(),
        question: question.to_string(),
        token_count,
        budget,
        dropped: start,
    })
}

/// Realizes `schema` over `docs_by_class` and budgets the result.
pub fn compose(
    schema: &PromptSchema,
    instruction: &str,
    record: &QueryRecord,
    docs_by_class: &BTreeMap<SlotClass, Vec<ContextDoc>>,
    budget: usize,
    counter: &dyn TokenCounter,
) -> Result<PromptPlan, PromptError> {
    compose_ordered(
        instruction,
        &record.question,
        schema.realize(docs_by_class),
        budget,
        counter,
    )
}
