use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("token counting failed: {0}")]
pub struct TokenCountError(pub String);

/// Counts model tokens in a rendered prompt. Implementations must be monotone:
/// appending text never lowers the count.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> Result<usize, TokenCountError>;
}

/// Approximate counter: `ceil(ratio × whitespace words)`, with the ratio
/// expressed in tokens per hundred words to keep the arithmetic exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordRatioCounter {
    pub tokens_per_hundred_words: usize,
}

impl Default for WordRatioCounter {
    fn default() -> Self {
        Self {
            tokens_per_hundred_words: 135,
        }
    }
}

impl TokenCounter for WordRatioCounter {
    fn count(&self, text: &str) -> Result<usize, TokenCountError> {
        let words = text.split_whitespace().count();
        Ok((words * self.tokens_per_hundred_words).div_ceil(100))
    }
}

pub fn count_tokens(text: &str, counter: &dyn TokenCounter) -> Result<usize, TokenCountError> {
    counter.count(text)
}
