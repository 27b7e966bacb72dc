use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusDoc;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

/// Sparse BM25 index with every (term, doc) impact computed at build time.
#[derive(Clone, Debug, PartialEq)]
pub struct Bm25Index {
    pub(crate) params: Bm25Params,
    pub(crate) avgdl: f64,
    pub(crate) doc_lens: Vec<u32>,
    pub(crate) item_ids: Vec<String>,
    /// Term to posting column.
    pub(crate) terms: HashMap<String, usize>,
    /// Per column: (doc, impact) sorted by doc.
    pub(crate) postings: Vec<Vec<(u32, f64)>>,
}

/// Lucene-style non-negative inverse document frequency.
pub fn idf(num_docs: usize, doc_freq: usize) -> f64 {
    let (d, n) = (num_docs as f64, doc_freq as f64);
    (1.0 + (d - n + 0.5) / (n + 0.5)).ln()
}

pub fn impact(idf: f64, tf: f64, doc_len: f64, avgdl: f64, p: Bm25Params) -> f64 {
    idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * doc_len / avgdl))
}

pub fn build_index(docs: &[CorpusDoc], params: Bm25Params) -> Result<Bm25Index> {
    if docs.is_empty() {
        return Err(Error::EmptyInput("BM25 corpus".into()));
    }
    if !(params.k1 >= 0.0) || !(0.0..=1.0).contains(&params.b) {
        return Err(Error::Config(format!(
            "BM25 parameters out of range: k1={}, b={}",
            params.k1, params.b
        )));
    }
    let mut ids = HashSet::new();
    if let Some(dup) = docs.iter().find(|d| !ids.insert(d.item_id.as_str())) {
        return Err(Error::Invalid(format!("duplicate corpus item `{}`", dup.item_id)));
    }
    let doc_lens: Vec<u32> = docs.iter().map(|d| d.tokens.len() as u32).collect();
    let avgdl = doc_lens.iter().map(|&l| l as f64).sum::<f64>() / docs.len() as f64;
    if !(avgdl > 0.0) {
        return Err(Error::EmptyInput("BM25 corpus has no tokens".into()));
    }

    let mut tf: BTreeMap<&str, Vec<(u32, u32)>> = BTreeMap::new();
    for (d, doc) in docs.iter().enumerate() {
        let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
        for t in &doc.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        for (t, c) in counts {
            tf.entry(t).or_default().push((d as u32, c));
        }
    }

    let n_docs = docs.len();
    let columns: Vec<(&str, Vec<(u32, u32)>)> = tf.into_iter().collect();
    let postings: Vec<Vec<(u32, f64)>> = columns
        .par_iter()
        .map(|(_, list)| {
            let w = idf(n_docs, list.len());
            list.iter()
                .map(|&(d, f)| (d, impact(w, f as f64, doc_lens[d as usize] as f64, avgdl, params)))
                .collect()
        })
        .collect();
    let terms = columns
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (t.to_string(), i))
        .collect();
    Ok(Bm25Index {
        params,
        avgdl,
        doc_lens,
        item_ids: docs.iter().map(|d| d.item_id.clone()).collect(),
        terms,
        postings,
    })
}

impl Bm25Index {
    pub fn num_docs(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn doc_len(&self, doc: usize) -> u32 {
        self.doc_lens[doc]
    }

    pub fn postings(&self, term: &str) -> &[(u32, f64)] {
        self.terms.get(term).map_or(&[], |&c| &self.postings[c])
    }

    /// Total number of stored (term, doc) impacts.
    pub fn nnz(&self) -> usize {
        self.postings.iter().map(Vec::len).sum()
    }

    /// Terms in column order.
    pub fn vocabulary(&self) -> Vec<&str> {
        let mut v: Vec<(&str, usize)> = self.terms.iter().map(|(t, &c)| (t.as_str(), c)).collect();
        v.sort_by_key(|&(_, c)| c);
        v.into_iter().map(|(t, _)| t).collect()
    }
}

/// Dense score vector over docs; repeated query terms count repeatedly.
pub fn bm25_score<S: AsRef<str>>(index: &Bm25Index, query: &[S]) -> Vec<f64> {
    let mut scores = vec![0.0; index.num_docs()];
    for t in query {
        for &(d, w) in index.postings(t.as_ref()) {
            scores[d as usize] += w;
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn doc(id: &str, text: &str) -> CorpusDoc {
        CorpusDoc {
            item_id: id.into(),
            text: text.into(),
            tokens: text.split_whitespace().map(String::from).collect(),
        }
    }

    /// Direct formula for one (query, doc) pair, no precomputation.
    fn naive(docs: &[CorpusDoc], query: &[&str], d: usize, p: Bm25Params) -> f64 {
        let n = docs.len() as f64;
        let avgdl = docs.iter().map(|x| x.tokens.len() as f64).sum::<f64>() / n;
        let len = docs[d].tokens.len() as f64;
        query
            .iter()
            .map(|q| {
                let nt = docs.iter().filter(|x| x.tokens.iter().any(|t| t == q)).count() as f64;
                let f = docs[d].tokens.iter().filter(|t| t == q).count() as f64;
                if f == 0.0 {
                    return 0.0;
                }
                let idf = (1.0 + (n - nt + 0.5) / (nt + 0.5)).ln();
                idf * f * (p.k1 + 1.0) / (f + p.k1 * (1.0 - p.b + p.b * len / avgdl))
            })
            .sum()
    }

    #[test]
    fn single_doc_hand_value() {
        let idx = build_index(&[doc("x", "a b")], Bm25Params::default()).unwrap();
        let s = bm25_score(&idx, &["a"]);
        assert!((s[0] - (4.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn absent_and_empty_queries() {
        let idx = build_index(&[doc("x", "a b"), doc("y", "c")], Bm25Params::default()).unwrap();
        assert!(idx.postings("zzz").is_empty());
        assert_eq!(bm25_score(&idx, &["zzz"]), vec![0.0, 0.0]);
        assert_eq!(bm25_score::<&str>(&idx, &[]), vec![0.0, 0.0]);
        let s = bm25_score(&idx, &["c"]);
        assert_eq!(s[0], 0.0);
        assert!(s[1] > 0.0);
    }

    #[test]
    fn duplicate_query_terms_count_twice() {
        let idx = build_index(&[doc("x", "a b"), doc("y", "b c")], Bm25Params::default()).unwrap();
        let one = bm25_score(&idx, &["a"]);
        let two = bm25_score(&idx, &["a", "a"]);
        assert_eq!(two[0], 2.0 * one[0]);
    }

    #[test]
    fn matches_naive_formula() {
        let docs = vec![
            doc("1", "red wool sweater red"),
            doc("2", "blue cotton shirt"),
            doc("3", "red cotton socks pack of three"),
            doc("4", "sweater"),
        ];
        let p = Bm25Params { k1: 1.2, b: 0.6 };
        let idx = build_index(&docs, p).unwrap();
        for q in [vec!["red"], vec!["cotton", "sweater"], vec!["red", "red", "socks"], vec!["none"]] {
            let s = bm25_score(&idx, &q);
            for d in 0..docs.len() {
                assert!((s[d] - naive(&docs, &q, d, p)).abs() <= 1e-12);
            }
        }
        assert_eq!(idx.nnz(), 3 + 3 + 6 + 1);
        assert!(idx.postings.iter().flatten().all(|&(_, w)| w > 0.0));
    }

    #[test]
    fn build_errors() {
        assert!(build_index(&[], Bm25Params::default()).is_err());
        assert!(build_index(&[doc("a", "x"), doc("a", "y")], Bm25Params::default()).is_err());
        assert!(build_index(&[doc("a", "")], Bm25Params::default()).is_err());
        assert!(build_index(&[doc("a", "x")], Bm25Params { k1: 1.5, b: 2.0 }).is_err());
    }
}
