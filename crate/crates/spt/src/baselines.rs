//! BM25 sparse retrieval over schema descriptions.
//!
//! Lucene-style IDF with +1 inside the log and a floor at zero, so scores on
//! tiny corpora stay nonnegative:
//! `score = Σ_t IDF(t)·tf·(k1+1) / (tf + k1·(1−b+b·len/avglen))`,
//! `IDF(t) = ln((N−df+0.5)/(df+0.5) + 1)`.

use std::collections::HashMap;

use crate::error::{Result, SptError};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    names: Vec<String>,
    doc_terms: Vec<HashMap<String, usize>>,
    doc_len: Vec<usize>,
    df: HashMap<String, usize>,
    avg_len: f64,
}

fn terms(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn build_index(docs: &[(String, String)], k1: f64, b: f64) -> Result<Bm25Index> {
    if docs.is_empty() {
        return Err(SptError::EmptyCorpus);
    }
    let mut doc_terms = Vec::with_capacity(docs.len());
    let mut doc_len = Vec::with_capacity(docs.len());
    let mut df: HashMap<String, usize> = HashMap::new();
    for (_, text) in docs {
        let ts = terms(text);
        doc_len.push(ts.len());
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in ts {
            *counts.entry(t).or_insert(0) += 1;
        }
        for t in counts.keys() {
            *df.entry(t.clone()).or_insert(0) += 1;
        }
        doc_terms.push(counts);
    }
    let avg_len = doc_len.iter().sum::<usize>() as f64 / docs.len() as f64;
    Ok(Bm25Index {
        k1,
        b,
        names: docs.iter().map(|(n, _)| n.clone()).collect(),
        doc_terms,
        doc_len,
        df,
        avg_len,
    })
}

impl Bm25Index {
    pub fn n_docs(&self) -> usize {
        self.names.len()
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(&term.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.df(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln().max(0.0)
    }

    pub fn score(&self, query: &str, doc: usize) -> Result<f64> {
        if doc >= self.n_docs() {
            return Err(SptError::InvalidDoc(doc));
        }
        let len = self.doc_len[doc] as f64;
        let norm = self.k1 * (1.0 - self.b + self.b * len / self.avg_len);
        let mut total = 0.0;
        for t in terms(query) {
            let tf = self.doc_terms[doc].get(&t).copied().unwrap_or(0) as f64;
            if tf == 0.0 {
                continue;
            }
            total += self.idf(&t) * tf * (self.k1 + 1.0) / (tf + norm);
        }
        Ok(total)
    }

    /// Top-k schema names by descending score; ties break by ascending doc id.
    pub fn topk(&self, query: &str, k: usize) -> Vec<String> {
        let mut scored: Vec<(usize, f64)> = (0..self.n_docs())
            .map(|d| (d, self.score(query, d).expect("valid doc id")))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        scored
            .into_iter()
            .take(k)
            .map(|(d, _)| self.names[d].clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(n, t)| (n.to_string(), t.to_string()))
            .collect()
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            build_index(&[], DEFAULT_K1, DEFAULT_B),
            Err(SptError::EmptyCorpus)
        ));
    }

    #[test]
    fn single_doc_avg_len() {
        let idx = build_index(&docs(&[("d", "a b")]), DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(idx.avg_len(), 2.0);
        assert_eq!(idx.df("zz"), 0);
    }

    #[test]
    fn document_frequency_counts_docs_not_occurrences() {
        let idx = build_index(&docs(&[("x", "a b"), ("y", "b c")]), DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(idx.df("a"), 1);
        assert_eq!(idx.df("b"), 2);
    }

    #[test]
    fn hand_computed_score() {
        // corpus {"a b","b c"}, query "a", doc 0: tf=1, len=avglen=2, df=1, N=2
        // idf = ln((2-1+0.5)/(1+0.5) + 1) = ln 2; tf term = 2.2/(1 + 1.2) = 1
        let idx = build_index(&docs(&[("x", "a b"), ("y", "b c")]), DEFAULT_K1, DEFAULT_B).unwrap();
        let s = idx.score("a", 0).unwrap();
        assert!((s - 2.0f64.ln()).abs() < 1e-12, "{s}");
    }

    #[test]
    fn no_overlap_scores_zero() {
        let idx = build_index(&docs(&[("x", "a b")]), DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(idx.score("q r", 0).unwrap(), 0.0);
        assert_eq!(idx.score("", 0).unwrap(), 0.0);
    }

    #[test]
    fn invalid_doc_id() {
        let idx = build_index(&docs(&[("x", "a")]), DEFAULT_K1, DEFAULT_B).unwrap();
        assert!(matches!(idx.score("a", 5), Err(SptError::InvalidDoc(5))));
    }

    #[test]
    fn topk_tie_break_by_doc_id() {
        let idx = build_index(
            &docs(&[("x", "a"), ("y", "b"), ("z", "c")]),
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap();
        // query matches nothing: all scores zero, expect id order
        assert_eq!(idx.topk("qq", 3), vec!["x", "y", "z"]);
        // k >= n_docs yields a permutation of everything
        assert_eq!(idx.topk("qq", 10).len(), 3);
    }

    #[test]
    fn score_nonnegative_and_monotone_under_padding() {
        // adding a non-query term to a doc never increases its score
        let short = build_index(&docs(&[("x", "a b"), ("y", "c d")]), DEFAULT_K1, DEFAULT_B)
            .unwrap();
        let padded = build_index(
            &docs(&[("x", "a b zz"), ("y", "c d")]),
            DEFAULT_K1,
            DEFAULT_B,
        )
        .unwrap();
        let q = "a";
        assert!(padded.score(q, 0).unwrap() <= short.score(q, 0).unwrap());
        assert!(short.score(q, 0).unwrap() >= 0.0);
    }
}
