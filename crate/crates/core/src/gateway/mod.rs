//! Generation interface over an external completion endpoint, plus a
//! deterministic oracle backend for tests and dry runs.
//!
//! Wire contract: `POST {model, prompt, max_tokens, temperature: 0}` returning
//! `{text}`. Greedy decoding is expressed as temperature 0.

mod http;
mod mock;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QueryRecord;
use crate::prompt::PromptPlan;

pub use http::{HttpBackend, HttpConfig, HttpTokenCounter};
pub use mock::{oracle_generate, MockBackend, OracleMode};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt of {prompt_tokens} tokens plus {max_new_tokens} new tokens exceeds the model context limit of {limit}")]
    ContextLimit {
        prompt_tokens: usize,
        max_new_tokens: usize,
        limit: usize,
    },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed endpoint response: {body}")]
    Malformed { body: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    #[serde(default)]
    pub decoding: Decoding,
    pub model_context_limit: usize,
}

impl GenerationParams {
    pub fn new(max_new_tokens: usize, model_context_limit: usize) -> Result<Self, GatewayError> {
        if max_new_tokens == 0 {
            return Err(GatewayError::InvalidParams(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        Ok(Self {
            max_new_tokens,
            decoding: Decoding::Greedy,
            model_context_limit,
        })
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 15,
            decoding: Decoding::Greedy,
            model_context_limit: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub backend: BackendKind,
    pub latency: Duration,
}

/// Everything a backend may look at for one completion.
#[derive(Debug, Clone, Copy)]
pub struct CompletionCall<'a> {
    pub plan: &'a PromptPlan,
    pub record: &'a QueryRecord,
    pub prompt: &'a str,
    pub max_tokens: usize,
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Raw completion text for `call`.
    fn complete(&self, call: &CompletionCall<'_>) -> Result<String, GatewayError>;
}

/// Checks the context limit, sends the rendered plan and trims the reply.
pub fn generate(
    plan: &PromptPlan,
    record: &QueryRecord,
    params: &GenerationParams,
    backend: &dyn Backend,
) -> Result<GenerationResult, GatewayError> {
    if plan.token_count + params.max_new_tokens > params.model_context_limit {
        return Err(GatewayError::ContextLimit {
            prompt_tokens: plan.token_count,
            max_new_tokens: params.max_new_tokens,
            limit: params.model_context_limit,
        });
    }
    let prompt = plan.render();
    let started = Instant::now();
    let text = backend.complete(&CompletionCall {
        plan,
        record,
        prompt: &prompt,
        max_tokens: params.max_new_tokens,
    })?;
    Ok(GenerationResult {
        text: text.trim().to_string(),
        backend: backend.kind(),
        latency: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Origin, Passage};
    use crate::prompt::{compose_ordered, ContextDoc, WordRatioCounter};
    use crate::taxonomy::DocLabel;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting(AtomicUsize);

    impl Backend for Counting {
        fn kind(&self) -> BackendKind {
            BackendKind::Http
        }
        fn complete(&self, _: &CompletionCall<'_>) -> Result<String, GatewayError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok("  spaced out \n".into())
        }
    }

    fn plan_and_record() -> (PromptPlan, QueryRecord) {
        let record = QueryRecord {
            id: "q".into(),
            question: "capital of france?".into(),
            answers: vec!["Paris".into()],
            gold_passage_id: Some("g".into()),
        };
        let ctx = vec![ContextDoc {
            passage: Passage::new("g", "France", "the capital is paris", Origin::MainCorpus),
            label: DocLabel::Gold,
        }];
        let plan = compose_ordered(
            "I",
            &record.question,
            ctx,
            500,
            &WordRatioCounter::default(),
        )
        .unwrap();
        (plan, record)
    }

    #[test]
    fn mock_returns_answer() {
        let (plan, record) = plan_and_record();
        let out = generate(
            &plan,
            &record,
            &GenerationParams::default(),
            &MockBackend::new(OracleMode::ExactExtractive),
        )
        .unwrap();
        assert_eq!(out.text, "Paris");
        assert_eq!(out.backend, BackendKind::Mock);
    }

    #[test]
    fn trims_backend_output() {
        let (plan, record) = plan_and_record();
        let backend = Counting(AtomicUsize::new(0));
        let out = generate(&plan, &record, &GenerationParams::default(), &backend).unwrap();
        assert_eq!(out.text, "spaced out");
    }

    #[test]
    fn context_limit_is_checked_before_sending() {
        let (plan, record) = plan_and_record();
        let backend = Counting(AtomicUsize::new(0));
        let params = GenerationParams::new(15, plan.token_count + 14).unwrap();
        assert!(matches!(
            generate(&plan, &record, &params, &backend),
            Err(GatewayError::ContextLimit { .. })
        ));
        assert_eq!(backend.0.load(Ordering::SeqCst), 0);
        let params = GenerationParams::new(15, plan.token_count + 15).unwrap();
        generate(&plan, &record, &params, &backend).unwrap();
        assert_eq!(backend.0.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn zero_new_tokens_rejected() {
        assert!(GenerationParams::new(0, 2048).is_err());
    }
}
