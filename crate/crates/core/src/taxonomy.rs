//! Document typing (gold / relevant / distracting / random) and the answer
//! containment predicate used by both classification and evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, QueryRecord};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("answer list is empty")]
    EmptyAnswers,
    #[error("randomly sampled passage {0:?} is the gold passage; resample")]
    SampledGold(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocLabel {
    Gold,
    Relevant,
    Distracting,
    Random,
}

impl DocLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            DocLabel::Gold => "gold",
            DocLabel::Relevant => "relevant",
            DocLabel::Distracting => "distracting",
            DocLabel::Random => "random",
        }
    }
}

impl std::fmt::Display for DocLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a document reached the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Returned by a retriever at this 1-based rank.
    Retrieved(usize),
    SampledRandom,
}

/// Lowercases, maps every non-alphanumeric character to a space, collapses
/// whitespace runs and trims.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    out
}

/// True iff some answer, normalized, occurs as a contiguous run of whole words
/// in the normalized text. Answers that normalize to nothing never match.
pub fn contains_answer<S: AsRef<str>>(text: &str, answers: &[S]) -> Result<bool, TaxonomyError> {
    if answers.is_empty() {
        return Err(TaxonomyError::EmptyAnswers);
    }
    let haystack = normalize(text);
    let words: Vec<&str> = haystack.split(' ').filter(|w| !w.is_empty()).collect();
    Ok(answers.iter().any(|answer| {
        let needle = normalize(answer.as_ref());
        let needle: Vec<&str> = needle.split(' ').filter(|w| !w.is_empty()).collect();
        !needle.is_empty() && words.windows(needle.len()).any(|w| w == needle.as_slice())
    }))
}

/// Assigns exactly one label to `doc` for `record`.
///
/// Gold is decided by id alone. Retrieved documents are relevant or
/// distracting depending on answer containment; sampled documents are random.
pub fn classify(
    doc: &Passage,
    record: &QueryRecord,
    provenance: Provenance,
) -> Result<DocLabel, TaxonomyError> {
    if record.answers.is_empty() {
        return Err(TaxonomyError::EmptyAnswers);
    }
    let is_gold = record.gold_passage_id.as_deref() == Some(doc.id.as_str());
    match provenance {
        Provenance::SampledRandom if is_gold => Err(TaxonomyError::SampledGold(doc.id.clone())),
        Provenance::SampledRandom => Ok(DocLabel::Random),
        Provenance::Retrieved(_) if is_gold => {
            if !contains_answer(&doc.text, &record.answers)? {
                tracing::warn!(
                    query = %record.id,
                    passage = %doc.id,
                    "gold passage does not contain any accepted answer"
                );
            }
            Ok(DocLabel::Gold)
        }
        Provenance::Retrieved(_) => {
            if contains_answer(&doc.text, &record.answers)? {
                Ok(DocLabel::Relevant)
            } else {
                Ok(DocLabel::Distracting)
            }
        }
    }
}
