use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{BackendKind, HttpConfig, OracleMode};
use crate::prompt::{GoldPosition, NoiseKind, PadLayout, PromptSchema, SlotClass};

use super::presets::{Grid, Preset};

/// One validation failure, addressed by its dotted config path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn list(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(|i| format!("\n  {i}"))
        .collect::<String>()
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override {0:?}, expected key=value")]
    Override(String),
    #[error("invalid configuration:{}", list(.0))]
    Invalid(Vec<Issue>),
    #[error("checksum mismatch for {key}: manifest has {expected}, file has {actual}")]
    Checksum {
        key: String,
        expected: String,
        actual: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Passage JSONL.
    pub main: PathBuf,
    /// Query JSONL.
    pub queries: PathBuf,
    /// Gold passages merged into the main corpus before indexing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<PathBuf>,
    /// Passage JSONL used by `alternate_corpus` noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternate: Option<PathBuf>,
    /// Whitespace-separated word list for `nonsense_words` noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// Use only the first `n` queries of the query file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_queries: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverSection {
    pub kind: RetrieverKind,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Prebuilt sparse index; built in memory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse_index: Option<PathBuf>,
    /// Passage embedding matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    /// Query embedding matrix, rows keyed by query id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_embeddings: Option<PathBuf>,
}

fn default_depth() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterKind {
    #[default]
    Words,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_position: Option<GoldPosition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
    #[serde(default)]
    pub n_distracting: usize,
    #[serde(default)]
    pub n_retrieved: usize,
    #[serde(default)]
    pub n_random: usize,
    /// Prompt token budget; defaults to the context limit minus the
    /// generation allowance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default)]
    pub counter: CounterKind,
    #[serde(default = "default_ratio")]
    pub tokens_per_hundred_words: usize,
    /// Fill the remaining budget with noise documents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad: Option<PadLayout>,
}

fn default_ratio() -> usize {
    135
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            schema: None,
            gold_position: None,
            instruction: None,
            n_distracting: 0,
            n_retrieved: 0,
            n_random: 0,
            budget: None,
            counter: CounterKind::Words,
            tokens_per_hundred_words: default_ratio(),
            pad: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_noise_kind")]
    pub kind: NoiseKind,
    pub seed: u64,
    #[serde(default = "default_nonsense_words")]
    pub nonsense_words: usize,
}

fn default_noise_kind() -> NoiseKind {
    NoiseKind::SameCorpus
}

fn default_nonsense_words() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default = "default_backend")]
    pub kind: BackendKind,
    #[serde(default = "default_oracle")]
    pub oracle: OracleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpConfig>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_context_limit")]
    pub model_context_limit: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_backend() -> BackendKind {
    BackendKind::Mock
}

fn default_oracle() -> OracleMode {
    OracleMode::ExactExtractive
}

fn default_max_new_tokens() -> usize {
    15
}

fn default_context_limit() -> usize {
    4096
}

fn default_in_flight() -> usize {
    4
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: default_backend(),
            oracle: default_oracle(),
            http: None,
            max_new_tokens: default_max_new_tokens(),
            model_context_limit: default_context_limit(),
            max_in_flight: default_in_flight(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Cutoffs for retrieval top-k accuracy.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub topk: Vec<usize>,
}

/// Preset grid overrides.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<GoldPosition>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved: Option<Vec<usize>>,
}

impl SweepSection {
    fn is_empty(&self) -> bool {
        self.counts.is_none() && self.positions.is_none() && self.retrieved.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub corpus: CorpusSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retriever: Option<RetrieverSection>,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "SweepSection::is_empty")]
    pub sweep: SweepSection,
}

/// Applies `key.path=value` overrides to a parsed TOML document. Values are
/// read as TOML literals, falling back to plain strings.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(item.clone()))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(ConfigError::Override(item.clone()));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut table = &mut *doc;
        for part in parts {
            let entry = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Override(item.clone()))?;
        }
        table.insert(last.to_string(), value);
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        Self::deserialize(table).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn schema(&self) -> Option<Result<PromptSchema, String>> {
        self.prompt
            .schema
            .as_ref()
            .map(|s| PromptSchema::from_str(s).map_err(|e| e.to_string()))
    }

    pub fn budget(&self) -> usize {
        self.prompt.budget.unwrap_or_else(|| {
            self.backend
                .model_context_limit
                .saturating_sub(self.backend.max_new_tokens)
        })
    }

    /// Top-k cutoffs to evaluate, falling back to the preset's defaults.
    pub fn topk(&self) -> Vec<usize> {
        if self.eval.topk.is_empty() {
            self.preset
                .map(|p| p.default_topk().to_vec())
                .unwrap_or_default()
        } else {
            self.eval.topk.clone()
        }
    }

    /// Checks the whole configuration and reports every problem found.
    /// Relative paths are resolved against `workdir`.
    pub fn validate(&self, workdir: &Path) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut issue = |path: &str, message: String| {
            issues.push(Issue {
                path: path.to_string(),
                message,
            })
        };

        let check_file = |issue: &mut dyn FnMut(&str, String), path: &str, p: &Path| {
            let full = workdir.join(p);
            if !full.is_file() {
                issue(path, format!("file {} does not exist", full.display()));
            }
        };
        check_file(&mut issue, "corpus.main", &self.corpus.main);
        check_file(&mut issue, "corpus.queries", &self.corpus.queries);
        for (path, p) in [
            ("corpus.gold", &self.corpus.gold),
            ("corpus.alternate", &self.corpus.alternate),
            ("corpus.lexicon", &self.corpus.lexicon),
        ] {
            if let Some(p) = p {
                check_file(&mut issue, path, p);
            }
        }
        if self.corpus.max_queries == Some(0) {
            issue("corpus.max_queries", "must be at least 1".into());
        }

        let preset_schema = self.preset.map(Preset::schema);
        let schema = match (self.schema(), preset_schema) {
            (Some(_), Some(_)) => {
                issue(
                    "prompt.schema",
                    "is fixed by the preset and must not be set".into(),
                );
                None
            }
            (Some(Ok(s)), None) => Some(s),
            (Some(Err(e)), None) => {
                issue("prompt.schema", e);
                None
            }
            (None, Some(s)) => Some(s),
            (None, None) => {
                issue(
                    "prompt.schema",
                    "is required unless a preset is selected".into(),
                );
                None
            }
        };
        if self.preset.is_none() && !self.sweep.is_empty() {
            issue("sweep", "only applies to presets".into());
        }
        for (path, values) in [
            ("sweep.counts", &self.sweep.counts),
            ("sweep.retrieved", &self.sweep.retrieved),
        ] {
            if values.as_ref().is_some_and(Vec::is_empty) {
                issue(path, "must not be empty".into());
            }
        }
        if self.sweep.positions.as_ref().is_some_and(Vec::is_empty) {
            issue("sweep.positions", "must not be empty".into());
        }
        if self
            .sweep
            .retrieved
            .as_ref()
            .is_some_and(|r| r.contains(&0))
        {
            issue("sweep.retrieved", "values must be at least 1".into());
        }

        let preset_uses = |p: Preset| self.preset == Some(p);
        if let Some(schema) = &schema {
            if self.preset.is_none() {
                if self.prompt.gold_position.is_some() && !schema.contains(SlotClass::Gold) {
                    issue(
                        "prompt.gold_position",
                        format!("schema {schema} has no gold slot"),
                    );
                }
                for (path, n, class) in [
                    (
                        "prompt.n_distracting",
                        self.prompt.n_distracting,
                        SlotClass::Distracting,
                    ),
                    (
                        "prompt.n_retrieved",
                        self.prompt.n_retrieved,
                        SlotClass::Retrieved,
                    ),
                    ("prompt.n_random", self.prompt.n_random, SlotClass::Random),
                ] {
                    if n > 0 && !schema.contains(class) {
                        issue(path, format!("schema {schema} has no {class} slot"));
                    }
                }
            }
            let needs_retriever = schema.contains(SlotClass::Distracting)
                || schema.contains(SlotClass::Retrieved)
                || !self.topk().is_empty();
            if needs_retriever && self.retriever.is_none() {
                issue(
                    "retriever",
                    "a retriever is required for distracting or retrieved slots and top-k evaluation"
                        .into(),
                );
            }
            let needs_noise = schema.contains(SlotClass::Random)
                || self.prompt.pad.is_some()
                || preset_uses(Preset::RetrieverTradeoff);
            if needs_noise && self.noise.is_none() {
                issue(
                    "noise",
                    "a noise section with a seed is required for random documents and padding"
                        .into(),
                );
            }
        }

        if let Some(r) = &self.retriever {
            if r.depth == 0 {
                issue("retriever.depth", "must be at least 1".into());
            }
            let retrieved = match self.preset {
                Some(_) => Grid::build(self).max_retrieved(),
                None => self.prompt.n_retrieved,
            };
            let needed = self.topk().into_iter().max().unwrap_or(0).max(retrieved);
            if r.depth < needed {
                issue(
                    "retriever.depth",
                    format!("{} is below the {needed} documents requested", r.depth),
                );
            }
            match r.kind {
                RetrieverKind::Sparse => {
                    if r.k1.is_some_and(|k1| !(k1.is_finite() && k1 >= 0.0)) {
                        issue("retriever.k1", "must be a non-negative number".into());
                    }
                    if r.b.is_some_and(|b| !(0.0..=1.0).contains(&b)) {
                        issue("retriever.b", "must lie in [0, 1]".into());
                    }
                    if let Some(p) = &r.sparse_index {
                        check_file(&mut issue, "retriever.sparse_index", p);
                    }
                    for (path, set) in [
                        ("retriever.embeddings", r.embeddings.is_some()),
                        ("retriever.query_embeddings", r.query_embeddings.is_some()),
                    ] {
                        if set {
                            issue(path, "only applies to the dense retriever".into());
                        }
                    }
                }
                RetrieverKind::Dense => {
                    for (path, p) in [
                        ("retriever.embeddings", &r.embeddings),
                        ("retriever.query_embeddings", &r.query_embeddings),
                    ] {
                        match p {
                            Some(p) => check_file(&mut issue, path, p),
                            None => issue(path, "is required for the dense retriever".into()),
                        }
                    }
                    for (path, set) in [
                        ("retriever.k1", r.k1.is_some()),
                        ("retriever.b", r.b.is_some()),
                        ("retriever.sparse_index", r.sparse_index.is_some()),
                    ] {
                        if set {
                            issue(path, "only applies to the sparse retriever".into());
                        }
                    }
                }
            }
        }

        if let Some(noise) = &self.noise {
            match noise.kind {
                NoiseKind::AlternateCorpus if self.corpus.alternate.is_none() => issue(
                    "corpus.alternate",
                    "is required for alternate_corpus noise".into(),
                ),
                NoiseKind::NonsenseWords if self.corpus.lexicon.is_none() => issue(
                    "corpus.lexicon",
                    "is required for nonsense_words noise".into(),
                ),
                _ => {}
            }
            if noise.nonsense_words == 0 {
                issue("noise.nonsense_words", "must be at least 1".into());
            }
            if noise.seed > i64::MAX as u64 {
                issue("noise.seed", "must fit in a signed 64-bit integer".into());
            }
        }

        if self.prompt.tokens_per_hundred_words == 0 {
            issue(
                "prompt.tokens_per_hundred_words",
                "must be at least 1".into(),
            );
        }
        let b = &self.backend;
        if b.max_new_tokens == 0 {
            issue("backend.max_new_tokens", "must be at least 1".into());
        }
        if b.max_in_flight == 0 {
            issue("backend.max_in_flight", "must be at least 1".into());
        }
        if b.max_new_tokens > b.model_context_limit {
            issue(
                "backend.model_context_limit",
                format!("{} leaves no room for the prompt", b.model_context_limit),
            );
        } else if self.budget() + b.max_new_tokens > b.model_context_limit {
            issue(
                "prompt.budget",
                format!(
                    "{} plus max_new_tokens {} exceeds the context limit {}",
                    self.budget(),
                    b.max_new_tokens,
                    b.model_context_limit
                ),
            );
        }
        if self.budget() == 0 {
            issue("prompt.budget", "must be at least 1".into());
        }
        if let OracleMode::FirstDocBiased { p, seed } = b.oracle {
            if !(0.0..=1.0).contains(&p) {
                issue("backend.oracle.p", "must lie in [0, 1]".into());
            }
            if seed > i64::MAX as u64 {
                issue(
                    "backend.oracle.seed",
                    "must fit in a signed 64-bit integer".into(),
                );
            }
        }
        match b.kind {
            BackendKind::Http if b.http.is_none() => {
                issue("backend.http", "is required for the http backend".into())
            }
            BackendKind::Mock if b.http.is_some() => {
                issue("backend.http", "only applies to the http backend".into())
            }
            _ => {}
        }
        if self.prompt.counter == CounterKind::Http
            && !b.http.as_ref().is_some_and(|h| h.tokenize_url.is_some())
        {
            issue(
                "prompt.counter",
                "http counting needs backend.http.tokenize_url".into(),
            );
        }
        if self.eval.topk.contains(&0) {
            issue("eval.topk", "values must be at least 1".into());
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }
}
