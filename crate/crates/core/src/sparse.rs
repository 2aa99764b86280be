//! BM25 over an in-memory inverted index.
//!
//! Passages are addressed internally by their position in the sorted id list,
//! so posting lists sorted by that position are also sorted by passage id and
//! the built index does not depend on corpus iteration order.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::ranking::{to_scored, ScoredDoc, TopK};

const MAGIC: &[u8; 4] = b"RGS1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("unknown passage id {0:?}")]
    UnknownPassage(String),
    #[error("bad magic bytes {0:?}, expected \"RGS1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported index format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt index: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

/// Lowercased maximal alphanumeric runs, in order.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseIndex {
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    avg_doc_length: f64,
    params: Bm25Params,
}

fn mean_length(lengths: &[u32]) -> f64 {
    let total: u64 = lengths.iter().map(|&l| u64::from(l)).sum();
    total as f64 / lengths.len() as f64
}

impl SparseIndex {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self, SparseError> {
        if corpus.is_empty() {
            return Err(SparseError::EmptyCorpus);
        }
        // Corpus iterates in ascending id order.
        let mut doc_ids = Vec::with_capacity(corpus.document_count());
        let mut doc_lengths = Vec::with_capacity(corpus.document_count());
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (doc, passage) in corpus.iter().enumerate() {
            let tokens = tokenize(&passage.text);
            doc_ids.push(passage.id.clone());
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf: count,
                });
            }
        }
        Ok(Self {
            avg_doc_length: mean_length(&doc_lengths),
            doc_ids,
            doc_lengths,
            postings,
            params,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn postings(&self, term: &str) -> Option<&[Posting]> {
        self.postings.get(term).map(Vec::as_slice)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn doc_length(&self, passage_id: &str) -> Option<u32> {
        self.position(passage_id).map(|i| self.doc_lengths[i])
    }

    fn position(&self, passage_id: &str) -> Option<usize> {
        self.doc_ids
            .binary_search_by(|id| id.as_str().cmp(passage_id))
            .ok()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = 1.0 - b + b * f64::from(len) / self.avg_doc_length;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 score of one passage. Repeated query terms contribute once per
    /// occurrence.
    pub fn bm25_score<S: AsRef<str>>(
        &self,
        query_terms: &[S],
        passage_id: &str,
    ) -> Result<f64, SparseError> {
        let doc = self
            .position(passage_id)
            .ok_or_else(|| SparseError::UnknownPassage(passage_id.to_string()))?;
        let mut score = 0.0;
        for term in query_terms {
            let Some(list) = self.postings.get(term.as_ref()) else {
                continue;
            };
            if let Ok(i) = list.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += self.term_weight(self.idf(list.len()), list[i].tf, self.doc_lengths[doc]);
            }
        }
        Ok(score)
    }

    /// Top `k` passages for `question`, best first, ties by ascending id.
    /// Passages matching no query term take part with score 0.
    pub fn search(&self, question: &str, k: usize) -> Vec<ScoredDoc> {
        let terms = tokenize(question);
        let mut scores = vec![0.0f64; self.doc_count()];
        // Term-at-a-time in query order: each document accumulates its
        // contributions in the same order as `bm25_score`.
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for p in list {
                let doc = p.doc as usize;
                scores[doc] += self.term_weight(idf, p.tf, self.doc_lengths[doc]);
            }
        }
        let mut top = TopK::new(k);
        for (doc, &score) in scores.iter().enumerate() {
            top.push(doc, &self.doc_ids[doc], score);
        }
        to_scored(&self.doc_ids, top.into_sorted())
    }

    /// Serializes the index: header, document table, then term dictionary
    /// with posting lists. All integers little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.params.k1.to_le_bytes())?;
        w.write_all(&self.params.b.to_le_bytes())?;
        w.write_all(&(self.doc_ids.len() as u64).to_le_bytes())?;
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            write_str(&mut w, id)?;
            w.write_all(&len.to_le_bytes())?;
        }
        w.write_all(&(self.postings.len() as u64).to_le_bytes())?;
        for (term, list) in &self.postings {
            write_str(&mut w, term)?;
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for p in list {
                w.write_all(&p.doc.to_le_bytes())?;
                w.write_all(&p.tf.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SparseError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SparseError::BadMagic(magic));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(SparseError::UnsupportedVersion(version));
        }
        let k1 = f64::from_le_bytes(read_array(&mut r)?);
        let b = f64::from_le_bytes(read_array(&mut r)?);
        let n_docs = read_u64(&mut r)? as usize;
        if n_docs == 0 {
            return Err(SparseError::Corrupt("zero documents".into()));
        }
        let mut doc_ids = Vec::with_capacity(n_docs.min(1 << 20));
        let mut doc_lengths = Vec::with_capacity(n_docs.min(1 << 20));
        for _ in 0..n_docs {
            let id = read_str(&mut r)?;
            if doc_ids.last().is_some_and(|prev: &String| prev >= &id) {
                return Err(SparseError::Corrupt(format!(
                    "document ids not strictly ascending at {id:?}"
                )));
            }
            doc_ids.push(id);
            doc_lengths.push(read_u32(&mut r)?);
        }
        let n_terms = read_u64(&mut r)?;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = read_str(&mut r)?;
            let len = read_u32(&mut r)? as usize;
            let mut list: Vec<Posting> = Vec::with_capacity(len.min(n_docs));
            for _ in 0..len {
                let doc = read_u32(&mut r)?;
                let tf = read_u32(&mut r)?;
                if doc as usize >= n_docs || list.last().is_some_and(|p| p.doc >= doc) || tf == 0 {
                    return Err(SparseError::Corrupt(format!(
                        "bad posting ({doc}, {tf}) for term {term:?}"
                    )));
                }
                list.push(Posting { doc, tf });
            }
            postings.insert(term, list);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(SparseError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            avg_doc_length: mean_length(&doc_lengths),
            doc_ids,
            doc_lengths,
            postings,
            params: Bm25Params { k1, b },
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    let len = u32::try_from(s.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "string too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    read_array(r).map(u32::from_le_bytes)
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    read_array(r).map(u64::from_le_bytes)
}

fn read_str<R: Read>(r: &mut R) -> Result<String, SparseError> {
    let len = read_u32(r)? as usize;
    let mut buf = Vec::with_capacity(len.min(1 << 16));
    r.by_ref().take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(SparseError::Io(io::ErrorKind::UnexpectedEof.into()));
    }
    String::from_utf8(buf).map_err(|e| SparseError::Corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Origin, Passage};
    use proptest::prelude::*;

    fn corpus(texts: &[(&str, &str)]) -> Corpus {
        Corpus::from_passages(
            texts
                .iter()
                .map(|(id, text)| Passage::new(*id, "t", *text, Origin::MainCorpus)),
        )
        .unwrap()
    }

    /// Direct evaluation of the Okapi formula from raw passage text.
    fn oracle_score(texts: &[(&str, &str)], query: &[&str], id: &str, k1: f64, b: f64) -> f64 {
        let docs: Vec<Vec<String>> = texts.iter().map(|(_, t)| tokenize(t)).collect();
        let n = docs.len() as f64;
        let avg = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
        let target = texts.iter().position(|(i, _)| *i == id).unwrap();
        let len = docs[target].len() as f64;
        query
            .iter()
            .map(|q| {
                let tf = docs[target].iter().filter(|t| t == q).count() as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                let df = docs.iter().filter(|d| d.iter().any(|t| t == q)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avg))
            })
            .sum()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("The Color—of Napoléon's horse!"),
            vec!["the", "color", "of", "napoléon", "s", "horse"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("ABC abc"), vec!["abc", "abc"]);
    }

    #[test]
    fn build_two_docs() {
        let idx = SparseIndex::build(
            &corpus(&[("a", "cat"), ("b", "dog")]),
            Bm25Params::default(),
        )
        .unwrap();
        assert_eq!(idx.terms().collect::<Vec<_>>(), vec!["cat", "dog"]);
        assert_eq!(idx.avg_doc_length(), 1.0);
    }

    #[test]
    fn build_is_order_independent() {
        let fwd = [("a", "x y z"), ("b", "y y"), ("c", "z q")];
        let mut rev = fwd;
        rev.reverse();
        let a = SparseIndex::build(&corpus(&fwd), Bm25Params::default()).unwrap();
        let b = SparseIndex::build(
            &Corpus::from_passages(
                rev.iter()
                    .map(|(id, t)| Passage::new(*id, "t", *t, Origin::MainCorpus)),
            )
            .unwrap(),
            Bm25Params::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_passage_has_zero_length_and_no_postings() {
        let idx =
            SparseIndex::build(&corpus(&[("a", "cat"), ("e", "")]), Bm25Params::default()).unwrap();
        assert_eq!(idx.doc_length("e"), Some(0));
        for t in idx.terms() {
            assert!(idx.postings(t).unwrap().iter().all(|p| p.doc != 1));
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            SparseIndex::build(&Corpus::new(), Bm25Params::default()),
            Err(SparseError::EmptyCorpus)
        ));
    }

    #[test]
    fn absent_terms_score_zero() {
        let idx = SparseIndex::build(
            &corpus(&[("a", "cat"), ("b", "dog")]),
            Bm25Params::default(),
        )
        .unwrap();
        assert_eq!(idx.bm25_score(&["fish", "bird"], "a").unwrap(), 0.0);
        assert!(matches!(
            idx.bm25_score(&["cat"], "zzz"),
            Err(SparseError::UnknownPassage(_))
        ));
    }

    #[test]
    fn two_doc_score_matches_formula() {
        let texts = [("a", "cat cat"), ("b", "dog")];
        let idx = SparseIndex::build(&corpus(&texts), Bm25Params { k1: 0.9, b: 0.4 }).unwrap();
        // N=2, df=1, tf=2, len=2, avg_len=1.5
        let expected = oracle_score(&texts, &["cat"], "a", 0.9, 0.4);
        let idf = (1.0f64 + 1.5 / 1.5).ln();
        let by_hand = idf * 2.0 * 1.9 / (2.0 + 0.9 * (0.6 + 0.4 * 2.0 / 1.5));
        assert!((expected - by_hand).abs() < 1e-12);
        assert!((idx.bm25_score(&["cat"], "a").unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn k1_invariance_at_unit_tf_and_mean_length() {
        // tf=1 and len=avg: tf*(k1+1)/(tf+k1) = 1 for every k1.
        let texts = [("a", "cat dog"), ("b", "dog fish")];
        for k1 in [0.45, 0.9, 1.8, 3.6] {
            let idx = SparseIndex::build(&corpus(&texts), Bm25Params { k1, b: 0.4 }).unwrap();
            let got = idx.bm25_score(&["cat"], "a").unwrap();
            let oracle = oracle_score(&texts, &["cat"], "a", k1, 0.4);
            assert!((got - oracle).abs() < 1e-12);
            assert!((got - (1.0f64 + 1.5 / 1.5).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn search_saturates_and_breaks_ties_by_id() {
        let idx = SparseIndex::build(
            &corpus(&[("c", "x"), ("a", "y"), ("b", "z")]),
            Bm25Params::default(),
        )
        .unwrap();
        let all = idx.search("nothing matches", 10);
        let ids: Vec<_> = all.iter().map(|d| d.passage_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert!(all.iter().all(|d| d.score == 0.0));
        assert_eq!(
            all.iter().map(|d| d.rank).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        let two = idx.search("z", 2);
        assert_eq!(two[0].passage_id, "b");
        assert_eq!(two[1].passage_id, "a");
    }

    #[test]
    fn persistence_round_trip_is_bit_identical() {
        let idx = SparseIndex::build(
            &corpus(&[
                ("a", "the cat sat"),
                ("b", "the dog ran far"),
                ("c", "cat cat dog"),
            ]),
            Bm25Params { k1: 1.2, b: 0.75 },
        )
        .unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let loaded = SparseIndex::read_from(buf.as_slice()).unwrap();
        assert_eq!(loaded, idx);
        for q in ["cat", "the dog", "far far cat"] {
            let x = idx.search(q, 3);
            let y = loaded.search(q, 3);
            assert_eq!(x.len(), y.len());
            for (a, b) in x.iter().zip(&y) {
                assert_eq!(a.passage_id, b.passage_id);
                assert_eq!(a.score.to_bits(), b.score.to_bits());
            }
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            SparseIndex::read_from(bad.as_slice()),
            Err(SparseError::BadMagic(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            SparseIndex::read_from(bad.as_slice()),
            Err(SparseError::UnsupportedVersion(9))
        ));
        assert!(SparseIndex::read_from(&buf[..buf.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn insertion_rescales_only_through_n_and_avg(
            docs in prop::collection::vec(prop::collection::vec(0u8..6, 0..8), 1..12),
            query in prop::collection::vec(0u8..6, 1..4),
            filler_len in 0usize..10,
        ) {
            let texts: Vec<(String, String)> = docs.iter().enumerate()
                .map(|(i, d)| (format!("d{i:02}"), d.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")))
                .collect();
            let q: Vec<String> = query.iter().map(|w| format!("w{w}")).collect();
            let filler = vec!["zz"; filler_len].join(" ");
            let mut extended = texts.clone();
            extended.push(("d99".into(), filler));
            let view: Vec<(&str, &str)> = extended.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let idx = SparseIndex::build(&corpus(&view), Bm25Params::default()).unwrap();
            let qs: Vec<&str> = q.iter().map(String::as_str).collect();
            for (id, _) in &texts {
                let got = idx.bm25_score(&qs, id).unwrap();
                let want = oracle_score(&view, &qs, id, 0.9, 0.4);
                prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
                prop_assert!(got >= 0.0);
            }
        }
    }
}
