use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    merge_gold, parse_corpus, parse_queries, Corpus, CorpusError, Passage, QueryRecord,
};
use crate::dense::{DenseError, EmbeddingMatrix};
use crate::eval::{
    report_table, score_response, topk_accuracy, EvalReport, QueryOutcome, ResultTable,
};
use crate::gateway::{
    generate, Backend, BackendKind, GatewayError, GenerationParams, HttpBackend, MockBackend,
};
use crate::prompt::{
    compose, compose_ordered, pad_with_random, place_gold, ContextDoc, GoldPosition, NoisePools,
    NoiseSource, PromptError, PromptPlan, SlotClass, TokenCounter, WordRatioCounter,
    DEFAULT_INSTRUCTION,
};
use crate::ranking::ScoredDoc;
use crate::seeds::sha256_hex;
use crate::sparse::{Bm25Params, SparseError, SparseIndex};
use crate::taxonomy::{classify, DocLabel, Provenance};

use super::config::{ConfigError, CounterKind, ExperimentConfig, RetrieverKind};
use super::presets::{Cell, Grid, Layout, Preset};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("{path}: {source}")]
    Sparse { path: PathBuf, source: SparseError },
    #[error("{path}: {source}")]
    Dense { path: PathBuf, source: DenseError },
    #[error("building sparse index: {0}")]
    Index(SparseError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Other(String),
}

fn read_file(workdir: &Path, rel: &Path) -> Result<Vec<u8>, RunError> {
    let path = workdir.join(rel);
    std::fs::read(&path).map_err(|e| RunError::Io {
        path,
        message: e.to_string(),
    })
}

fn utf8(path: &Path, bytes: Vec<u8>) -> Result<String, RunError> {
    String::from_utf8(bytes).map_err(|e| RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

enum Retriever {
    Sparse(SparseIndex),
    Dense {
        passages: EmbeddingMatrix,
        queries: EmbeddingMatrix,
    },
}

/// Loaded inputs and backends for one configuration.
pub struct Session {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub alternate: Option<Corpus>,
    pub lexicon: Vec<String>,
    pub queries: Vec<QueryRecord>,
    /// SHA-256 of every input file, keyed by config path.
    pub checksums: BTreeMap<String, String>,
    retriever: Option<Retriever>,
    backend: Box<dyn Backend>,
    counter: Box<dyn TokenCounter>,
    params: GenerationParams,
}

impl Session {
    /// Validates `config` and loads everything it references.
    pub fn open(config: ExperimentConfig, workdir: &Path) -> Result<Session, RunError> {
        config.validate(workdir)?;
        let mut checksums = BTreeMap::new();
        let mut load = |key: &str, rel: &Path| -> Result<Vec<u8>, RunError> {
            let bytes = read_file(workdir, rel)?;
            checksums.insert(key.to_string(), sha256_hex(&bytes));
            Ok(bytes)
        };
        let corpus_file = |rel: &Path, bytes: Vec<u8>| -> Result<Corpus, RunError> {
            parse_corpus(&utf8(rel, bytes)?).map_err(|source| RunError::Corpus {
                path: rel.to_path_buf(),
                source,
            })
        };

        let c = &config.corpus;
        let mut corpus = corpus_file(&c.main, load("corpus.main", &c.main)?)?;
        let queries_text = utf8(&c.queries, load("corpus.queries", &c.queries)?)?;
        let mut queries = parse_queries(&queries_text).map_err(|source| RunError::Corpus {
            path: c.queries.clone(),
            source,
        })?;
        if let Some(n) = c.max_queries {
            queries.truncate(n);
        }
        if let Some(rel) = &c.gold {
            let gold = corpus_file(rel, load("corpus.gold", rel)?)?;
            let gold: BTreeMap<String, Passage> =
                gold.iter().map(|p| (p.id.clone(), p.clone())).collect();
            corpus = merge_gold(&corpus, &queries, &gold).map_err(|source| RunError::Corpus {
                path: rel.clone(),
                source,
            })?;
        }
        let alternate = match &c.alternate {
            Some(rel) => Some(corpus_file(rel, load("corpus.alternate", rel)?)?),
            None => None,
        };
        let lexicon = match &c.lexicon {
            Some(rel) => utf8(rel, load("corpus.lexicon", rel)?)?
                .split_whitespace()
                .map(str::to_string)
                .collect(),
            None => Vec::new(),
        };

        let retriever = match &config.retriever {
            None => None,
            Some(r) => Some(match r.kind {
                RetrieverKind::Sparse => match &r.sparse_index {
                    Some(rel) => {
                        let bytes = load("retriever.sparse_index", rel)?;
                        let index = SparseIndex::read_from(bytes.as_slice()).map_err(|source| {
                            RunError::Sparse {
                                path: rel.clone(),
                                source,
                            }
                        })?;
                        Retriever::Sparse(index)
                    }
                    None => {
                        let defaults = Bm25Params::default();
                        let params = Bm25Params {
                            k1: r.k1.unwrap_or(defaults.k1),
                            b: r.b.unwrap_or(defaults.b),
                        };
                        Retriever::Sparse(
                            SparseIndex::build(&corpus, params).map_err(RunError::Index)?,
                        )
                    }
                },
                RetrieverKind::Dense => {
                    let matrix = |key: &str,
                                  rel: &PathBuf,
                                  load: &mut dyn FnMut(
                        &str,
                        &Path,
                    )
                        -> Result<Vec<u8>, RunError>| {
                        let bytes = load(key, rel)?;
                        EmbeddingMatrix::from_bytes(&bytes).map_err(|source| RunError::Dense {
                            path: rel.clone(),
                            source,
                        })
                    };
                    let passages = matrix(
                        "retriever.embeddings",
                        r.embeddings.as_ref().expect("validated"),
                        &mut load,
                    )?;
                    let queries = matrix(
                        "retriever.query_embeddings",
                        r.query_embeddings.as_ref().expect("validated"),
                        &mut load,
                    )?;
                    if passages.dim() != queries.dim() {
                        return Err(RunError::Other(format!(
                            "passage embeddings have dimension {} but query embeddings have {}",
                            passages.dim(),
                            queries.dim()
                        )));
                    }
                    Retriever::Dense { passages, queries }
                }
            }),
        };

        let b = &config.backend;
        let params = GenerationParams {
            max_new_tokens: b.max_new_tokens,
            decoding: Default::default(),
            model_context_limit: b.model_context_limit,
        };
        let (backend, http_counter): (Box<dyn Backend>, _) = match b.kind {
            BackendKind::Mock => (Box::new(MockBackend::new(b.oracle)), None),
            BackendKind::Http => {
                let http = HttpBackend::new(b.http.clone().expect("validated"))?;
                let counter = http.token_counter();
                (Box::new(http), counter)
            }
        };
        let counter: Box<dyn TokenCounter> = match config.prompt.counter {
            CounterKind::Words => Box::new(WordRatioCounter {
                tokens_per_hundred_words: config.prompt.tokens_per_hundred_words,
            }),
            CounterKind::Http => Box::new(http_counter.expect("validated")),
        };

        Ok(Session {
            config,
            corpus,
            alternate,
            lexicon,
            queries,
            checksums,
            retriever,
            backend,
            counter,
            params,
        })
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    pub fn query(&self, id: &str) -> Option<&QueryRecord> {
        self.queries.iter().find(|q| q.id == id)
    }

    pub fn has_retriever(&self) -> bool {
        self.retriever.is_some()
    }

    /// Top `k` passages for a question. Dense retrieval needs a stored query
    /// embedding, so it only works for known query ids.
    pub fn search(
        &self,
        query_id: Option<&str>,
        question: &str,
        k: usize,
    ) -> Result<Vec<ScoredDoc>, String> {
        match self.retriever.as_ref().ok_or("no retriever configured")? {
            Retriever::Sparse(index) => Ok(index.search(question, k)),
            Retriever::Dense { passages, queries } => {
                let id = query_id.ok_or("dense retrieval needs a query id")?;
                let q = queries
                    .row_by_id(id)
                    .ok_or_else(|| format!("no query embedding for {id:?}"))?;
                passages.search(q, k).map_err(|e| e.to_string())
            }
        }
    }

    /// Retrieves for `record` and labels every result.
    pub fn retrieve(&self, record: &QueryRecord, k: usize) -> Result<Vec<ScoredDoc>, String> {
        let mut docs = self.search(Some(&record.id), &record.question, k)?;
        for doc in &mut docs {
            let passage = self.corpus.get(&doc.passage_id).ok_or_else(|| {
                format!(
                    "retrieved passage {:?} is not in the corpus",
                    doc.passage_id
                )
            })?;
            let label = classify(passage, record, Provenance::Retrieved(doc.rank))
                .map_err(|e| e.to_string())?;
            doc.label = Some(label);
        }
        Ok(docs)
    }

    fn depth(&self) -> usize {
        self.config.retriever.as_ref().map_or(0, |r| r.depth)
    }

    fn pools(&self) -> NoisePools<'_> {
        NoisePools {
            main: &self.corpus,
            alternate: self.alternate.as_ref(),
            lexicon: &self.lexicon,
            nonsense_words: self.config.noise.map_or(0, |n| n.nonsense_words),
        }
    }

    fn noise(&self) -> Result<NoiseSource, String> {
        self.config
            .noise
            .map(|n| NoiseSource {
                kind: n.kind,
                seed: n.seed,
            })
            .ok_or_else(|| "no noise source configured".to_string())
    }

    fn context_doc(&self, id: &str, label: DocLabel) -> Result<ContextDoc, String> {
        let passage = self
            .corpus
            .get(id)
            .ok_or_else(|| format!("passage {id:?} is not in the corpus"))?;
        Ok(ContextDoc {
            passage: passage.clone(),
            label,
        })
    }

    /// Builds the prompt `cell` prescribes for `record`. The second value
    /// lists shortfalls against the requested document counts.
    pub fn compose_cell(
        &self,
        cell: &Cell,
        record: &QueryRecord,
        position: Option<GoldPosition>,
        retrieved: Option<&Result<Vec<ScoredDoc>, String>>,
    ) -> Result<(PromptPlan, Vec<String>), String> {
        let schema = &cell.schema;
        let mut notes = Vec::new();
        let mut by_class: BTreeMap<SlotClass, Vec<ContextDoc>> = BTreeMap::new();
        let mut used: HashSet<String> = HashSet::new();

        if schema.contains(SlotClass::Distracting) || schema.contains(SlotClass::Retrieved) {
            let owned;
            let list = match retrieved {
                Some(r) => r.as_ref().map_err(Clone::clone)?,
                None => {
                    owned = self.retrieve(record, self.depth())?;
                    &owned
                }
            };
            if schema.contains(SlotClass::Distracting) {
                let docs = list
                    .iter()
                    .filter(|d| d.label == Some(DocLabel::Distracting))
                    .take(cell.n_distracting)
                    .map(|d| self.context_doc(&d.passage_id, DocLabel::Distracting))
                    .collect::<Result<Vec<_>, _>>()?;
                if docs.len() < cell.n_distracting {
                    notes.push(format!(
                        "only {} distracting documents within retrieval depth",
                        docs.len()
                    ));
                }
                by_class.insert(SlotClass::Distracting, docs);
            }
            if schema.contains(SlotClass::Retrieved) {
                let docs = list
                    .iter()
                    .take(cell.n_retrieved)
                    .map(|d| {
                        self.context_doc(&d.passage_id, d.label.unwrap_or(DocLabel::Distracting))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if docs.len() < cell.n_retrieved {
                    notes.push(format!("only {} retrieved documents", docs.len()));
                }
                by_class.insert(SlotClass::Retrieved, docs);
            }
            used.extend(by_class.values().flatten().map(|d| d.passage.id.clone()));
        }

        let gold = if schema.contains(SlotClass::Gold) {
            let id = record
                .gold_passage_id
                .as_deref()
                .ok_or("query has no gold passage")?;
            used.insert(id.to_string());
            Some(self.context_doc(id, DocLabel::Gold)?)
        } else {
            None
        };
        if let Some(gold) = &record.gold_passage_id {
            used.insert(gold.clone());
        }

        if schema.contains(SlotClass::Random) {
            let mut docs = Vec::with_capacity(cell.n_random);
            if cell.n_random > 0 {
                let stream = self
                    .noise()?
                    .derive(&record.id)
                    .stream(&self.pools(), &used)
                    .map_err(|e| e.to_string())?;
                for passage in stream.take(cell.n_random) {
                    let label = classify(&passage, record, Provenance::SampledRandom)
                        .map_err(|e| e.to_string())?;
                    docs.push(ContextDoc { passage, label });
                }
            }
            if docs.len() < cell.n_random {
                notes.push(format!("noise pool yielded only {} documents", docs.len()));
            }
            by_class.insert(SlotClass::Random, docs);
        }

        let instruction = self
            .config
            .prompt
            .instruction
            .as_deref()
            .unwrap_or(DEFAULT_INSTRUCTION);
        let budget = self.config.budget();
        let counter = self.counter();
        let plan = match (position, gold) {
            (Some(pos), Some(gold)) => {
                let rest = schema.without(SlotClass::Gold).realize(&by_class);
                compose_ordered(
                    instruction,
                    &record.question,
                    place_gold(rest, gold, pos),
                    budget,
                    counter,
                )
            }
            (_, gold) => {
                if let Some(gold) = gold {
                    by_class.insert(SlotClass::Gold, vec![gold]);
                }
                compose(schema, instruction, record, &by_class, budget, counter)
            }
        }
        .map_err(|e| e.to_string())?;

        let plan = match cell.pad {
            None => plan,
            Some(layout) => {
                let mut exclude = used;
                exclude.extend(plan.context.iter().map(|d| d.passage.id.clone()));
                let stream = self
                    .noise()?
                    .derive(&format!("{}/pad", record.id))
                    .stream(&self.pools(), &exclude)
                    .map_err(|e| e.to_string())?;
                pad_with_random(&plan, stream, counter, layout).map_err(|e| e.to_string())?
            }
        };
        if plan.dropped > 0 {
            notes.push(format!(
                "dropped {} documents to fit the budget",
                plan.dropped
            ));
        }
        Ok((plan, notes))
    }

    fn generate_outcome(
        &self,
        record: &QueryRecord,
        position: Option<GoldPosition>,
        prepared: Result<(PromptPlan, Vec<String>), String>,
    ) -> QueryOutcome {
        let mut outcome = QueryOutcome {
            query_id: record.id.clone(),
            response: String::new(),
            correct: false,
            position,
            n_context: 0,
            dropped: 0,
            note: None,
        };
        let (plan, mut notes) = match prepared {
            Ok(p) => p,
            Err(e) => {
                outcome.note = Some(e);
                return outcome;
            }
        };
        outcome.n_context = plan.context.len();
        outcome.dropped = plan.dropped;
        match generate(&plan, record, &self.params, self.backend.as_ref()) {
            Ok(result) => {
                outcome.correct = score_response(&result.text, &record.answers).unwrap_or(false);
                outcome.response = result.text;
            }
            Err(e) => {
                tracing::warn!(query = %record.id, error = %e, "generation failed");
                notes.push(e.to_string());
            }
        }
        if !notes.is_empty() {
            outcome.note = Some(notes.join("; "));
        }
        outcome
    }
}

/// A grid cell, or one of its positions, that was not run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub row: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<GoldPosition>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub table: ResultTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<ResultTable>,
    pub cells: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedCell>,
}

/// Reproducibility record written next to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub checksums: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

pub fn tool_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub struct RunOutput {
    pub report: RunReport,
    pub manifest: Manifest,
}

fn echo(config: &ExperimentConfig, cell: &Cell) -> serde_json::Value {
    serde_json::json!({ "config": config, "cell": cell })
}

/// Runs every cell of the configured grid.
pub fn execute(session: &Session) -> Result<RunOutput, RunError> {
    let mut config = session.config.clone();
    config.output_dir = None;
    let grid = Grid::build(&config);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.backend.max_in_flight)
        .build()
        .map_err(|e| RunError::Other(e.to_string()))?;
    let queries = &session.queries;

    let topk = config.topk();
    let needs_retrieval = session.has_retriever()
        && (!topk.is_empty()
            || grid.cells.iter().any(|c| {
                c.schema.contains(SlotClass::Distracting) || c.schema.contains(SlotClass::Retrieved)
            }));
    let retrieved: Vec<Option<Result<Vec<ScoredDoc>, String>>> = if needs_retrieval {
        pool.install(|| {
            queries
                .par_iter()
                .map(|q| Some(session.retrieve(q, session.depth())))
                .collect()
        })
    } else {
        queries.iter().map(|_| None).collect()
    };

    let topk_acc = if topk.is_empty() || !needs_retrieval {
        BTreeMap::new()
    } else {
        let mut lists = BTreeMap::new();
        let mut ok_records = Vec::new();
        for (q, r) in queries.iter().zip(&retrieved) {
            match r {
                Some(Ok(list)) => {
                    lists.insert(q.id.clone(), list.clone());
                    ok_records.push(q.clone());
                }
                Some(Err(e)) => tracing::warn!(query = %q.id, error = %e, "retrieval failed"),
                None => {}
            }
        }
        let acc = topk_accuracy(&lists, &ok_records, &topk, &session.corpus)
            .map_err(|e| RunError::Other(e.to_string()))?;
        // Failed retrievals count as misses.
        let scale = ok_records.len() as f64 / queries.len().max(1) as f64;
        acc.into_iter().map(|(k, v)| (k, v * scale)).collect()
    };

    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    let mut exhausted: HashSet<usize> = HashSet::new();
    for cell in &grid.cells {
        if cell.group.is_some_and(|g| exhausted.contains(&g)) {
            skipped.push(SkippedCell {
                row: cell.row.clone(),
                column: cell.column.clone(),
                position: None,
                reason: "a smaller setting already exceeded the budget".into(),
            });
            continue;
        }
        let mut outcomes = Vec::new();
        let mut any_ran = false;
        for &position in &cell.positions {
            let prepared: Vec<_> = pool.install(|| {
                queries
                    .par_iter()
                    .zip(&retrieved)
                    .map(|(q, r)| session.compose_cell(cell, q, position, r.as_ref()))
                    .collect()
            });
            if grid.skip_truncated {
                let truncated = prepared
                    .iter()
                    .filter(|p| p.as_ref().is_ok_and(|(plan, _)| plan.dropped > 0))
                    .count();
                if truncated > 0 {
                    tracing::info!(row = %cell.row, ?position, truncated, "cell exceeds the budget, skipped");
                    skipped.push(SkippedCell {
                        row: cell.row.clone(),
                        column: cell.column.clone(),
                        position,
                        reason: format!("{truncated} prompts exceed the budget"),
                    });
                    continue;
                }
            }
            any_ran = true;
            let rows: Vec<QueryOutcome> = pool.install(|| {
                queries
                    .par_iter()
                    .zip(prepared)
                    .map(|(q, p)| session.generate_outcome(q, position, p))
                    .collect()
            });
            outcomes.extend(rows);
        }
        if !any_ran {
            if let Some(g) = cell.group {
                exhausted.insert(g);
            }
            continue;
        }
        cells.push(EvalReport::from_outcomes(
            echo(&config, cell),
            cell.row.clone(),
            cell.column.clone(),
            outcomes,
            topk_acc.clone(),
        ));
    }

    let table = build_table(&grid, &cells);
    let topk_table = (!topk_acc.is_empty()).then(|| ResultTable {
        row_header: "retriever".into(),
        columns: topk_acc.keys().map(|k| format!("top-{k}")).collect(),
        rows: vec![(
            config
                .retriever
                .as_ref()
                .map(|r| match r.kind {
                    RetrieverKind::Sparse => "sparse",
                    RetrieverKind::Dense => "dense",
                })
                .unwrap_or_default()
                .to_string(),
            topk_acc.values().copied().map(Some).collect(),
        )],
    });

    Ok(RunOutput {
        report: RunReport {
            preset: config.preset,
            table,
            topk: topk_table,
            cells,
            skipped,
        },
        manifest: Manifest {
            tool: tool_version(),
            checksums: session.checksums.clone(),
            config,
        },
    })
}

fn build_table(grid: &Grid, cells: &[EvalReport]) -> ResultTable {
    if grid.layout == Layout::Single {
        if let Some(report) = cells.first() {
            let mut table = report_table(report);
            table.rows[0].1.truncate(1 + report.per_position.len());
            table.columns.truncate(1 + report.per_position.len());
            return table;
        }
    }
    let find = |row: &str, column: Option<&str>| {
        cells
            .iter()
            .find(|c| c.label == row && c.column.as_deref() == column)
    };
    let rows = grid
        .rows
        .iter()
        .map(|row| {
            let values = match grid.layout {
                Layout::Positions => grid
                    .columns
                    .iter()
                    .map(|col| {
                        let pos: GoldPosition = col.parse().expect("position column");
                        find(row, None).and_then(|c| c.per_position.get(&pos).copied())
                    })
                    .collect(),
                _ => grid
                    .columns
                    .iter()
                    .map(|col| find(row, Some(col)).map(|c| c.accuracy))
                    .collect(),
            };
            (row.clone(), values)
        })
        .collect();
    ResultTable {
        row_header: grid.row_header.clone(),
        columns: if grid.layout == Layout::Single {
            vec!["accuracy".into()]
        } else {
            grid.columns.clone()
        },
        rows,
    }
}

/// Validates, loads and runs a single configuration without preset grids.
pub fn run_experiment(config: &ExperimentConfig, workdir: &Path) -> Result<EvalReport, RunError> {
    if config.preset.is_some() {
        return Err(ConfigError::Invalid(vec![super::config::Issue {
            path: "preset".into(),
            message: "grids produce several reports; use execute".into(),
        }])
        .into());
    }
    let session = Session::open(config.clone(), workdir)?;
    let mut out = execute(&session)?;
    out.report
        .cells
        .pop()
        .ok_or_else(|| RunError::Other("no report produced".into()))
}
