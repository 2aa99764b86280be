//! Scored results shared by the sparse and dense retrievers.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::taxonomy::DocLabel;

/// A passage reference with its retrieval score and 1-based rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub passage_id: String,
    pub score: f64,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<DocLabel>,
}

/// Result ordering: higher score first, then ascending id.
pub fn result_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Heap entry ordered so that the *worst* result is the heap maximum.
struct Candidate<'a> {
    score: f64,
    id: &'a str,
    row: usize,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        result_order(self.score, self.id, other.score, other.id)
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

/// Bounded selection of the best `k` `(row, id, score)` triples.
pub(crate) struct TopK<'a> {
    k: usize,
    heap: BinaryHeap<Candidate<'a>>,
}

impl<'a> TopK<'a> {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k.saturating_add(1).min(4096)),
        }
    }

    pub(crate) fn push(&mut self, row: usize, id: &'a str, score: f64) {
        if self.k == 0 {
            return;
        }
        let cand = Candidate { score, id, row };
        if self.heap.len() < self.k {
            self.heap.push(cand);
        } else if let Some(worst) = self.heap.peek() {
            if cand < *worst {
                self.heap.pop();
                self.heap.push(cand);
            }
        }
    }

    pub(crate) fn merge(mut self, other: TopK<'a>) -> Self {
        for c in other.heap {
            self.push(c.row, c.id, c.score);
        }
        self
    }

    /// Best-first `(row, score)` pairs.
    pub(crate) fn into_sorted(self) -> Vec<(usize, f64)> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| (c.row, c.score))
            .collect()
    }
}

pub(crate) fn to_scored(ids: &[String], ranked: Vec<(usize, f64)>) -> Vec<ScoredDoc> {
    ranked
        .into_iter()
        .enumerate()
        .map(|(i, (row, score))| ScoredDoc {
            passage_id: ids[row].clone(),
            score,
            rank: i + 1,
            label: None,
        })
        .collect()
}
