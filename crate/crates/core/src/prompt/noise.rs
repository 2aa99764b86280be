//! Random documents: same-corpus sampling, alternate-corpus sampling and
//! synthetic nonsense passages, plus padding a plan up to its budget.

use std::collections::{HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{render_prompt, ContextDoc, PromptError, PromptPlan, TokenCounter};
use crate::corpus::{Corpus, Origin, Passage};
use crate::seeds::derive_seed;
use crate::taxonomy::DocLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    SameCorpus,
    AlternateCorpus,
    NonsenseWords,
}

/// Where padding goes relative to the existing context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadLayout {
    /// Noise first, existing context next to the query.
    BeforeContext,
    AfterContext,
    /// `floor(m/2)` noise documents before the context, the rest after.
    SplitMid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSource {
    pub kind: NoiseKind,
    pub seed: u64,
}

/// Material the noise sources draw from.
#[derive(Debug, Clone, Copy)]
pub struct NoisePools<'a> {
    pub main: &'a Corpus,
    pub alternate: Option<&'a Corpus>,
    pub lexicon: &'a [String],
    /// Length of each synthetic passage.
    pub nonsense_words: usize,
}

impl NoiseSource {
    /// Same kind, seed mixed with `label` (typically a query id).
    pub fn derive(&self, label: &str) -> NoiseSource {
        NoiseSource {
            kind: self.kind,
            seed: derive_seed(self.seed, label),
        }
    }

    /// Deterministic document stream. Corpus-backed streams sample without
    /// replacement and end when the pool is exhausted; the nonsense stream is
    /// unbounded.
    pub fn stream<'a>(
        &self,
        pools: &NoisePools<'a>,
        exclude: &HashSet<String>,
    ) -> Result<NoiseStream<'a>, PromptError> {
        match self.kind {
            NoiseKind::SameCorpus => Ok(NoiseStream::Pool(PoolSampler::new(
                pools.main,
                self.seed,
                exclude.clone(),
                None,
            ))),
            NoiseKind::AlternateCorpus => {
                let alternate = pools.alternate.ok_or(PromptError::MissingAlternateCorpus)?;
                Ok(NoiseStream::Pool(PoolSampler::new(
                    alternate,
                    self.seed,
                    exclude.clone(),
                    Some(Origin::AlternateCorpus),
                )))
            }
            NoiseKind::NonsenseWords => {
                if pools.lexicon.is_empty() {
                    return Err(PromptError::EmptyLexicon);
                }
                if pools.nonsense_words == 0 {
                    return Err(PromptError::ZeroWords);
                }
                Ok(NoiseStream::Nonsense {
                    lexicon: pools.lexicon,
                    words: pools.nonsense_words,
                    seed: self.seed,
                    next: 0,
                })
            }
        }
    }
}

/// Lazy Fisher-Yates over corpus positions; no per-stream copy of the corpus.
#[derive(Debug)]
pub struct PoolSampler<'a> {
    corpus: &'a Corpus,
    rng: ChaCha8Rng,
    drawn: usize,
    swaps: HashMap<usize, usize>,
    exclude: HashSet<String>,
    relabel: Option<Origin>,
}

impl<'a> PoolSampler<'a> {
    fn new(
        corpus: &'a Corpus,
        seed: u64,
        exclude: HashSet<String>,
        relabel: Option<Origin>,
    ) -> Self {
        Self {
            corpus,
            rng: ChaCha8Rng::seed_from_u64(seed),
            drawn: 0,
            swaps: HashMap::new(),
            exclude,
            relabel,
        }
    }
}

impl Iterator for PoolSampler<'_> {
    type Item = Passage;

    fn next(&mut self) -> Option<Passage> {
        let n = self.corpus.document_count();
        while self.drawn < n {
            let i = self.drawn;
            let j = self.rng.random_range(i..n);
            let at_j = self.swaps.get(&j).copied().unwrap_or(j);
            let at_i = self.swaps.get(&i).copied().unwrap_or(i);
            self.swaps.insert(j, at_i);
            self.swaps.remove(&i);
            self.drawn += 1;
            let passage = self.corpus.nth(at_j).expect("position in range");
            if self.exclude.contains(&passage.id) {
                continue;
            }
            let mut out = passage.clone();
            if let Some(origin) = self.relabel {
                out.origin = origin;
            }
            return Some(out);
        }
        None
    }
}

#[derive(Debug)]
pub enum NoiseStream<'a> {
    Pool(PoolSampler<'a>),
    Nonsense {
        lexicon: &'a [String],
        words: usize,
        seed: u64,
        next: u64,
    },
}

impl Iterator for NoiseStream<'_> {
    type Item = Passage;

    fn next(&mut self) -> Option<Passage> {
        match self {
            NoiseStream::Pool(p) => p.next(),
            NoiseStream::Nonsense {
                lexicon,
                words,
                seed,
                next,
            } => {
                let s = derive_seed(*seed, &format!("nonsense/{next}"));
                *next += 1;
                nonsense_passage(*words, s, lexicon).ok()
            }
        }
    }
}

/// `n` distinct passages not in `exclude`, deterministic under `seed`.
pub fn sample_random(
    corpus: &Corpus,
    n: usize,
    seed: u64,
    exclude: &HashSet<String>,
) -> Result<Vec<Passage>, PromptError> {
    let excluded_present = exclude.iter().filter(|id| corpus.contains(id)).count();
    let available = corpus.document_count() - excluded_present;
    if available < n {
        return Err(PromptError::InsufficientPool {
            requested: n,
            available,
        });
    }
    Ok(PoolSampler::new(corpus, seed, exclude.clone(), None)
        .take(n)
        .collect())
}

/// A synthetic passage of `n_words` words drawn uniformly with replacement.
pub fn nonsense_passage(
    n_words: usize,
    seed: u64,
    lexicon: &[String],
) -> Result<Passage, PromptError> {
    if lexicon.is_empty() {
        return Err(PromptError::EmptyLexicon);
    }
    if n_words == 0 {
        return Err(PromptError::ZeroWords);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<&str> = (0..n_words)
        .map(|_| lexicon.choose(&mut rng).expect("non-empty").as_str())
        .collect();
    Ok(Passage::new(
        format!("nonsense#{seed:016x}"),
        "nonsense",
        words.join(" "),
        Origin::Synthetic,
    ))
}

fn arrange(existing: &[ContextDoc], noise: &[ContextDoc], layout: PadLayout) -> Vec<ContextDoc> {
    let mut out = Vec::with_capacity(existing.len() + noise.len());
    match layout {
        PadLayout::BeforeContext => {
            out.extend_from_slice(noise);
            out.extend_from_slice(existing);
        }
        PadLayout::AfterContext => {
            out.extend_from_slice(existing);
            out.extend_from_slice(noise);
        }
        PadLayout::SplitMid => {
            let (before, after) = noise.split_at(noise.len() / 2);
            out.extend_from_slice(before);
            out.extend_from_slice(existing);
            out.extend_from_slice(after);
        }
    }
    out
}

/// Adds noise documents from `noise` until one more would exceed the plan's
/// budget. The existing context keeps its internal order.
pub fn pad_with_random(
    plan: &PromptPlan,
    noise: impl IntoIterator<Item = Passage>,
    counter: &dyn TokenCounter,
    layout: PadLayout,
) -> Result<PromptPlan, PromptError> {
    let mut added: Vec<ContextDoc> = Vec::new();
    let mut context = plan.context.clone();
    let mut token_count = plan.token_count;
    for passage in noise {
        added.push(ContextDoc {
            passage,
            label: DocLabel::Random,
        });
        let candidate = arrange(&plan.context, &added, layout);
        let tokens = counter.count(&render_prompt(
            &plan.instruction,
            &candidate,
            &plan.question,
        ))?;
        if tokens > plan.budget {
            break;
        }
        context = candidate;
        token_count = tokens;
    }
    Ok(PromptPlan {
        context,
        token_count,
        ..plan.clone()
    })
}
