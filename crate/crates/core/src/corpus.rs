//! Passage corpus: segmentation, line-delimited ingestion and gold merging.
//!
//! A [`Corpus`] is an id-keyed, immutable collection of [`Passage`]s. Queries
//! live alongside it as [`QueryRecord`]s, each optionally pointing at the gold
//! passage that answers it.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("line {line}: query {id:?} has no answers")]
    EmptyAnswers { line: usize, id: String },
    #[error("query {query_id:?} references gold passage {passage_id:?}, which is neither in the corpus nor in the gold set")]
    UnresolvedGold {
        query_id: String,
        passage_id: String,
    },
}

/// Where a passage came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    MainCorpus,
    GoldMerged,
    AlternateCorpus,
    Synthetic,
}

/// One retrievable text unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    pub word_count: usize,
    pub origin: Origin,
}

impl Passage {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
        origin: Origin,
    ) -> Self {
        let text = text.into();
        Self {
            id: id.into(),
            title: title.into(),
            word_count: word_count(&text),
            text,
            origin,
        }
    }
}

/// Number of maximal non-whitespace runs in `text`.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// A question with its accepted answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_passage_id: Option<String>,
}

/// Id-keyed passage collection, stored in ascending id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    passages: Vec<Passage>,
    positions: HashMap<String, usize>,
}

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    fn from_map(map: BTreeMap<String, Passage>) -> Self {
        let passages: Vec<Passage> = map.into_values().collect();
        let positions = passages
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();
        Self {
            passages,
            positions,
        }
    }

    /// Builds a corpus, rejecting duplicate ids. Line numbers in the error are
    /// 1-based positions in `passages`.
    pub fn from_passages(passages: impl IntoIterator<Item = Passage>) -> Result<Self, CorpusError> {
        let mut map = BTreeMap::new();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (idx, passage) in passages.into_iter().enumerate() {
            let line = idx + 1;
            if let Some(&first_line) = lines.get(&passage.id) {
                return Err(CorpusError::DuplicateId {
                    id: passage.id,
                    first_line,
                    second_line: line,
                });
            }
            lines.insert(passage.id.clone(), line);
            map.insert(passage.id.clone(), passage);
        }
        Ok(Self::from_map(map))
    }

    pub fn document_count(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.positions.get(id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    /// Passage at position `i` in id order.
    pub fn nth(&self, i: usize) -> Option<&Passage> {
        self.passages.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.passages.iter().map(|p| p.id.as_str())
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a Passage;
    type IntoIter = std::slice::Iter<'a, Passage>;

    fn into_iter(self) -> Self::IntoIter {
        self.passages.iter()
    }
}

/// Splits `raw_text` into consecutive, non-overlapping passages of `window`
/// words. The trailing remainder becomes a shorter final passage.
///
/// Ids are `<title>#<index>` with any `#` removed from the title.
pub fn segment_document(title: &str, raw_text: &str, window: NonZeroUsize) -> Vec<Passage> {
    let stem: String = title.chars().filter(|&c| c != '#').collect();
    let words: Vec<&str> = raw_text.split_whitespace().collect();
    words
        .chunks(window.get())
        .enumerate()
        .map(|(idx, chunk)| Passage {
            id: format!("{stem}#{idx}"),
            title: title.to_string(),
            text: chunk.join(" "),
            word_count: chunk.len(),
            origin: Origin::MainCorpus,
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PassageLine {
    id: String,
    title: String,
    text: String,
    #[serde(default)]
    origin: Origin,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryLine {
    id: String,
    question: String,
    answers: Vec<String>,
    #[serde(default)]
    gold_passage_id: Option<String>,
}

fn read_lines(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Yields `(1-based line number, line)` for every non-blank line.
fn records(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(idx, line)| (idx + 1, line.trim()))
        .filter(|(_, line)| !line.is_empty())
}

/// Parses corpus lines (`{"id", "title", "text", "origin"?}`) from a string.
pub fn parse_corpus(content: &str) -> Result<Corpus, CorpusError> {
    let mut map = BTreeMap::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in records(content) {
        let parsed: PassageLine = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first_line) = seen.get(&parsed.id) {
            return Err(CorpusError::DuplicateId {
                id: parsed.id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(parsed.id.clone(), line_no);
        let passage = Passage::new(parsed.id, parsed.title, parsed.text, parsed.origin);
        map.insert(passage.id.clone(), passage);
    }
    Ok(Corpus::from_map(map))
}

pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    parse_corpus(&read_lines(path.as_ref())?)
}

/// Parses query lines (`{"id", "question", "answers", "gold_passage_id"?}`).
pub fn parse_queries(content: &str) -> Result<Vec<QueryRecord>, CorpusError> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line_no, line) in records(content) {
        let parsed: QueryLine = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if parsed.answers.is_empty() {
            return Err(CorpusError::EmptyAnswers {
                line: line_no,
                id: parsed.id,
            });
        }
        if let Some(&first_line) = seen.get(&parsed.id) {
            return Err(CorpusError::DuplicateId {
                id: parsed.id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(parsed.id.clone(), line_no);
        out.push(QueryRecord {
            id: parsed.id,
            question: parsed.question,
            answers: parsed.answers,
            gold_passage_id: parsed.gold_passage_id,
        });
    }
    Ok(out)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>, CorpusError> {
    parse_queries(&read_lines(path.as_ref())?)
}

/// Writes passages in the corpus line format.
pub fn write_corpus_lines<'a>(passages: impl IntoIterator<Item = &'a Passage>) -> String {
    let mut out = String::new();
    for p in passages {
        let line = serde_json::json!({
            "id": p.id,
            "title": p.title,
            "text": p.text,
            "origin": p.origin,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

/// Adds every gold passage to the corpus (origin `gold_merged`).
///
/// Passages whose id is already present are left untouched, which makes the
/// merge idempotent. Every record's gold id must resolve in either the corpus
/// or `gold_texts`.
pub fn merge_gold(
    corpus: &Corpus,
    records: &[QueryRecord],
    gold_texts: &BTreeMap<String, Passage>,
) -> Result<Corpus, CorpusError> {
    for record in records {
        if let Some(gold_id) = &record.gold_passage_id {
            if !corpus.contains(gold_id) && !gold_texts.contains_key(gold_id) {
                return Err(CorpusError::UnresolvedGold {
                    query_id: record.id.clone(),
                    passage_id: gold_id.clone(),
                });
            }
        }
    }
    let mut merged: BTreeMap<String, Passage> =
        corpus.iter().map(|p| (p.id.clone(), p.clone())).collect();
    for (id, passage) in gold_texts {
        if merged.contains_key(id) {
            continue;
        }
        let mut gold = passage.clone();
        gold.id = id.clone();
        gold.origin = Origin::GoldMerged;
        merged.insert(id.clone(), gold);
    }
    Ok(Corpus::from_map(merged))
}
