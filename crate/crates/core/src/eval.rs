//! Containment accuracy, top-k retrieval accuracy and result tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, QueryRecord};
use crate::prompt::GoldPosition;
use crate::ranking::ScoredDoc;
use crate::taxonomy::{contains_answer, TaxonomyError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no retrieval list for query {0:?}")]
    MissingRetrieval(String),
    #[error("retrieval list for query {query_id:?} has {len} entries, need {needed}")]
    ShortRetrieval {
        query_id: String,
        len: usize,
        needed: usize,
    },
    #[error("retrieved passage {0:?} is not in the corpus")]
    UnknownPassage(String),
    #[error("query {0:?} has no answers")]
    EmptyAnswers(String),
}

/// A response is correct iff it contains an accepted answer.
pub fn score_response<S: AsRef<str>>(response: &str, answers: &[S]) -> Result<bool, TaxonomyError> {
    contains_answer(response, answers)
}

/// Fraction of queries whose top-`k` list holds at least one answer-bearing
/// passage, for each `k`.
pub fn topk_accuracy(
    retrieved: &BTreeMap<String, Vec<ScoredDoc>>,
    records: &[QueryRecord],
    ks: &[usize],
    corpus: &Corpus,
) -> Result<BTreeMap<usize, f64>, EvalError> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let needed = max_k.min(corpus.document_count());
    let mut first_hits = Vec::with_capacity(records.len());
    for record in records {
        let list = retrieved
            .get(&record.id)
            .ok_or_else(|| EvalError::MissingRetrieval(record.id.clone()))?;
        if list.len() < needed {
            return Err(EvalError::ShortRetrieval {
                query_id: record.id.clone(),
                len: list.len(),
                needed,
            });
        }
        let mut first = None;
        for (i, doc) in list.iter().enumerate().take(max_k) {
            let passage = corpus
                .get(&doc.passage_id)
                .ok_or_else(|| EvalError::UnknownPassage(doc.passage_id.clone()))?;
            let hit = contains_answer(&passage.text, &record.answers)
                .map_err(|_| EvalError::EmptyAnswers(record.id.clone()))?;
            if hit {
                first = Some(i);
                break;
            }
        }
        first_hits.push(first);
    }
    let n = records.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = first_hits
                .iter()
                .filter(|h| h.is_some_and(|i| i < k))
                .count();
            (k, hits as f64 / n)
        })
        .collect())
}

/// One scored generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub response: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<GoldPosition>,
    /// Documents in the final prompt.
    pub n_context: usize,
    /// Documents dropped to fit the budget.
    #[serde(default)]
    pub dropped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_echo: serde_json::Value,
    /// Row label in result tables (e.g. the injected document count).
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub n_queries: usize,
    pub accuracy: f64,
    pub per_position: BTreeMap<GoldPosition, f64>,
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryOutcome>,
}

fn mean_correct<'a>(rows: impl Iterator<Item = &'a QueryOutcome>) -> f64 {
    let (hits, total) = rows.fold((0usize, 0usize), |(h, t), r| {
        (h + usize::from(r.correct), t + 1)
    });
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

impl EvalReport {
    /// Aggregates outcomes; rows are ordered by query id, then position.
    pub fn from_outcomes(
        config_echo: serde_json::Value,
        label: impl Into<String>,
        column: Option<String>,
        mut per_query: Vec<QueryOutcome>,
        topk_accuracy: BTreeMap<usize, f64>,
    ) -> Self {
        per_query.sort_by(|a, b| {
            a.query_id
                .cmp(&b.query_id)
                .then_with(|| a.position.cmp(&b.position))
        });
        let mut per_position = BTreeMap::new();
        for pos in GoldPosition::ALL {
            if per_query.iter().any(|r| r.position == Some(pos)) {
                per_position.insert(
                    pos,
                    mean_correct(per_query.iter().filter(|r| r.position == Some(pos))),
                );
            }
        }
        let mut ids: Vec<&str> = per_query.iter().map(|r| r.query_id.as_str()).collect();
        ids.dedup();
        Self {
            config_echo,
            label: label.into(),
            column,
            n_queries: ids.len(),
            accuracy: mean_correct(per_query.iter()),
            per_position,
            topk_accuracy,
            per_query,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// A labelled grid of accuracies. `None` cells render empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn render_table(table: &ResultTable, format: ReportFormat) -> String {
    let header: Vec<&str> = std::iter::once(table.row_header.as_str())
        .chain(table.columns.iter().map(String::as_str))
        .collect();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            w.write_record(&header).expect("in-memory write");
            for (label, values) in &table.rows {
                let mut record = vec![label.clone()];
                record.extend(values.iter().map(|v| cell(*v)));
                w.write_record(&record).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push('|');
            out.push_str(" --- |");
            for _ in &table.columns {
                out.push_str(" ---: |");
            }
            out.push('\n');
            for (label, values) in &table.rows {
                let cells: Vec<String> = values.iter().map(|v| cell(*v)).collect();
                out.push_str(
                    &format!("| {} | {} |\n", label, cells.join(" | ")).replace("|  |", "| |"),
                );
            }
            out
        }
    }
}

/// One-row table for a single report: accuracy, then near/mid/far and top-k
/// columns when those maps are non-empty.
pub fn report_table(report: &EvalReport) -> ResultTable {
    let mut columns = vec!["accuracy".to_string()];
    let mut values = vec![Some(report.accuracy)];
    for (pos, acc) in &report.per_position {
        columns.push(pos.to_string());
        values.push(Some(*acc));
    }
    for (k, acc) in &report.topk_accuracy {
        columns.push(format!("top-{k}"));
        values.push(Some(*acc));
    }
    ResultTable {
        row_header: "setting".into(),
        columns,
        rows: vec![(report.label.clone(), values)],
    }
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    render_table(&report_table(report), format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Origin, Passage};
    use serde_json::json;

    fn outcome(id: &str, correct: bool, position: Option<GoldPosition>) -> QueryOutcome {
        QueryOutcome {
            query_id: id.into(),
            response: if correct { "yes".into() } else { "no".into() },
            correct,
            position,
            n_context: 1,
            dropped: 0,
            note: None,
        }
    }

    #[test]
    fn score_response_examples() {
        assert!(score_response("it was george washington", &["George Washington"]).unwrap());
        assert!(!score_response("Roosevelt", &["President Roosevelt"]).unwrap());
        assert!(!score_response("unknown", &["Paris", "Lyon"]).unwrap());
        assert!(score_response::<&str>("x", &[]).is_err());
    }

    fn scored(ids: &[&str]) -> Vec<ScoredDoc> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| ScoredDoc {
                passage_id: id.to_string(),
                score: 10.0 - i as f64,
                rank: i + 1,
                label: None,
            })
            .collect()
    }

    #[test]
    fn topk_hand_count() {
        let corpus = Corpus::from_passages([
            Passage::new("a", "t", "nothing here", Origin::MainCorpus),
            Passage::new("b", "t", "paris is the answer", Origin::MainCorpus),
            Passage::new("c", "t", "berlin answer", Origin::MainCorpus),
        ])
        .unwrap();
        let records = vec![
            QueryRecord {
                id: "q1".into(),
                question: "?".into(),
                answers: vec!["Paris".into()],
                gold_passage_id: None,
            },
            QueryRecord {
                id: "q2".into(),
                question: "?".into(),
                answers: vec!["Berlin".into()],
                gold_passage_id: None,
            },
        ];
        let mut retrieved = BTreeMap::new();
        retrieved.insert("q1".to_string(), scored(&["a", "b"]));
        retrieved.insert("q2".to_string(), scored(&["c", "a"]));
        let acc = topk_accuracy(&retrieved, &records, &[1, 2], &corpus).unwrap();
        assert_eq!(acc, BTreeMap::from([(1, 0.5), (2, 1.0)]));

        retrieved.remove("q2");
        assert_eq!(
            topk_accuracy(&retrieved, &records, &[1], &corpus),
            Err(EvalError::MissingRetrieval("q2".into()))
        );
        retrieved.insert("q2".to_string(), scored(&["c"]));
        assert!(matches!(
            topk_accuracy(&retrieved, &records, &[2], &corpus),
            Err(EvalError::ShortRetrieval { .. })
        ));
    }

    #[test]
    fn report_aggregates_per_position() {
        let rows = vec![
            outcome("q2", true, Some(GoldPosition::Near)),
            outcome("q1", true, Some(GoldPosition::Near)),
            outcome("q1", false, Some(GoldPosition::Far)),
            outcome("q2", false, Some(GoldPosition::Far)),
        ];
        let report = EvalReport::from_outcomes(json!({}), "1", None, rows, BTreeMap::new());
        assert_eq!(report.n_queries, 2);
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.per_position[&GoldPosition::Near], 1.0);
        assert_eq!(report.per_position[&GoldPosition::Far], 0.0);
        assert!(!report.per_position.contains_key(&GoldPosition::Mid));
        assert_eq!(report.per_query[0].query_id, "q1");
    }

    #[test]
    fn render_formats_four_decimals() {
        let mut report = EvalReport::from_outcomes(
            json!({}),
            "0",
            None,
            vec![outcome("q", true, None)],
            BTreeMap::new(),
        );
        report.accuracy = 0.5642;
        let csv = render_report(&report, ReportFormat::Csv);
        assert_eq!(csv, "setting,accuracy\n0,0.5642\n");
        let md = render_report(&report, ReportFormat::Markdown);
        assert!(md.contains("| 0 | 0.5642 |"));
        assert_eq!(md, render_report(&report, ReportFormat::Markdown));
    }

    #[test]
    fn position_columns_follow_near_mid_far() {
        let rows = vec![
            outcome("q", true, Some(GoldPosition::Far)),
            outcome("q", false, Some(GoldPosition::Mid)),
            outcome("q", true, Some(GoldPosition::Near)),
        ];
        let report =
            EvalReport::from_outcomes(json!({}), "4", None, rows, BTreeMap::from([(1, 0.25)]));
        let csv = render_report(&report, ReportFormat::Csv);
        assert_eq!(
            csv,
            "setting,accuracy,near,mid,far,top-1\n4,0.6667,1.0000,0.0000,1.0000,0.2500\n"
        );
    }

    #[test]
    fn csv_quotes_and_empty_cells() {
        let table = ResultTable {
            row_header: "docs, \"n\"".into(),
            columns: vec!["near".into(), "far".into()],
            rows: vec![("1".into(), vec![Some(0.1), None])],
        };
        assert_eq!(
            render_table(&table, ReportFormat::Csv),
            "\"docs, \"\"n\"\"\",near,far\n1,0.1000,\n"
        );
        let md = render_table(&table, ReportFormat::Markdown);
        assert_eq!(md.lines().nth(2).unwrap(), "| 1 | 0.1000 | |");
    }
}
