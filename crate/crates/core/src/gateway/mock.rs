use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendKind, CompletionCall, GatewayError, GenerationResult};
use crate::corpus::QueryRecord;
use crate::prompt::PromptPlan;
use crate::seeds::derive_seed;
use crate::taxonomy::contains_answer;

/// Deterministic stand-in for a language model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OracleMode {
    /// Returns the first answer found scanning from the document nearest the
    /// query outwards, else `"unknown"`.
    ExactExtractive,
    /// With probability `p` answers from the document farthest from the query
    /// (its answer if present, otherwise its first three words); otherwise
    /// behaves as `ExactExtractive`. The draw is seeded per query.
    FirstDocBiased { p: f64, seed: u64 },
}

fn answer_in(text: &str, record: &QueryRecord) -> Option<String> {
    record
        .answers
        .iter()
        .find(|a| contains_answer(text, std::slice::from_ref(*a)).unwrap_or(false))
        .cloned()
}

fn extract(plan: &PromptPlan, record: &QueryRecord, mode: OracleMode) -> String {
    if let OracleMode::FirstDocBiased { p, seed } = mode {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &record.id));
        let draw: f64 = rng.random();
        if draw < p {
            if let Some(first) = plan.context.first() {
                return answer_in(&first.passage.text, record).unwrap_or_else(|| {
                    first
                        .passage
                        .text
                        .split_whitespace()
                        .take(3)
                        .collect::<Vec<_>>()
                        .join(" ")
                });
            }
        }
    }
    plan.context
        .iter()
        .rev()
        .find_map(|doc| answer_in(&doc.passage.text, record))
        .unwrap_or_else(|| "unknown".to_string())
}

pub fn oracle_generate(
    plan: &PromptPlan,
    record: &QueryRecord,
    mode: OracleMode,
) -> GenerationResult {
    let started = Instant::now();
    let text = extract(plan, record, mode);
    GenerationResult {
        text,
        backend: BackendKind::Mock,
        latency: started.elapsed(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockBackend {
    pub mode: OracleMode,
}

impl MockBackend {
    pub fn new(mode: OracleMode) -> Self {
        Self { mode }
    }
}

impl Backend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn complete(&self, call: &CompletionCall<'_>) -> Result<String, GatewayError> {
        Ok(extract(call.plan, call.record, self.mode))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Origin, Passage};
    use crate::prompt::{compose_ordered, place_gold, ContextDoc, GoldPosition, WordRatioCounter};
    use crate::taxonomy::DocLabel;

    fn record() -> QueryRecord {
        QueryRecord {
            id: "q9".into(),
            question: "what color was the horse?".into(),
            answers: vec!["white".into(), "grey".into()],
            gold_passage_id: Some("g".into()),
        }
    }

    fn doc(id: &str, text: &str, label: DocLabel) -> ContextDoc {
        ContextDoc {
            passage: Passage::new(id, "t", text, Origin::MainCorpus),
            label,
        }
    }

    fn plan(ctx: Vec<ContextDoc>) -> PromptPlan {
        compose_ordered("I", "q", ctx, 10_000, &WordRatioCounter::default()).unwrap()
    }

    fn gold() -> ContextDoc {
        doc("g", "the horse was white as snow", DocLabel::Gold)
    }

    fn distractor() -> ContextDoc {
        doc(
            "d",
            "josephine rode a brown mare daily",
            DocLabel::Distracting,
        )
    }

    #[test]
    fn gold_only_never_unknown() {
        let out = oracle_generate(&plan(vec![gold()]), &record(), OracleMode::ExactExtractive);
        assert_eq!(out.text, "white");
    }

    #[test]
    fn no_answer_is_unknown() {
        let out = oracle_generate(
            &plan(vec![distractor()]),
            &record(),
            OracleMode::ExactExtractive,
        );
        assert_eq!(out.text, "unknown");
        let out = oracle_generate(&plan(vec![]), &record(), OracleMode::ExactExtractive);
        assert_eq!(out.text, "unknown");
    }

    #[test]
    fn extractive_prefers_nearest_document() {
        let ctx = vec![
            doc("a", "it was grey", DocLabel::Relevant),
            doc("b", "it was white", DocLabel::Relevant),
        ];
        let out = oracle_generate(&plan(ctx), &record(), OracleMode::ExactExtractive);
        assert_eq!(out.text, "white");
    }

    #[test]
    fn fully_biased_reads_far_distractor() {
        let mode = OracleMode::FirstDocBiased { p: 1.0, seed: 3 };
        let ctx = place_gold(vec![distractor()], gold(), GoldPosition::Near);
        let out = oracle_generate(&plan(ctx), &record(), mode);
        assert_eq!(out.text, "josephine rode a");
        assert!(!contains_answer(&out.text, &record().answers).unwrap());
        let ctx = place_gold(vec![distractor()], gold(), GoldPosition::Far);
        let out = oracle_generate(&plan(ctx), &record(), mode);
        assert_eq!(out.text, "white");
    }

    #[test]
    fn zero_bias_matches_extractive_and_is_deterministic() {
        let ctx = vec![distractor(), gold()];
        let p = plan(ctx);
        let zero = oracle_generate(
            &p,
            &record(),
            OracleMode::FirstDocBiased { p: 0.0, seed: 1 },
        );
        assert_eq!(zero.text, "white");
        let half = OracleMode::FirstDocBiased { p: 0.5, seed: 1 };
        let a = oracle_generate(&p, &record(), half);
        let b = oracle_generate(&p, &record(), half);
        assert_eq!(a.text, b.text);
    }
}
