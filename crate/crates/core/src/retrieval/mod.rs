//! Eager BM25 over the item corpus and quasi-round-robin fusion of generated
//! candidates into one item ranking.

mod index;
pub mod store;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::encoder::vocab::split_words;
use crate::error::{Error, Result};
use crate::generation::Candidate;

pub use index::{bm25_score, build_index, idf, impact, Bm25Index, Bm25Params};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Per-item maximum of the modulated, scaled candidate scores.
    #[default]
    MaxPool,
    /// Strict alternation over candidates' ranked matches.
    RoundRobin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub n_pred: usize,
    pub epsilon: f64,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_pred: 20,
            epsilon: 1.0 / 5000.0,
            mode: FusionMode::MaxPool,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pred == 0 {
            return Err(Error::Config("n_pred must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Items in descending score order, ties broken by item id ascending.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Sort `(item_id, score)` pairs into a ranking. Duplicate ids are an error.
    pub fn from_scores(mut entries: Vec<(String, f64)>) -> Result<Self> {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Invalid(format!("duplicate item `{}` in ranking", w[0].0)));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based rank of `item_id`.
    pub fn rank_of(&self, item_id: &str) -> Option<usize> {
        self.entries.iter().position(|(id, _)| id == item_id).map(|p| p + 1)
    }

    pub fn top(&self, k: usize) -> &[(String, f64)] {
        &self.entries[..k.min(self.entries.len())]
    }

    pub fn is_valid(&self) -> bool {
        self.entries.windows(2).all(|w| match w[0].1.total_cmp(&w[1].1) {
            Ordering::Greater => true,
            Ordering::Equal => w[0].0 < w[1].0,
            Ordering::Less => false,
        })
    }
}

/// Min-max scale to [0, 1]; a constant vector maps to zeros.
pub fn scale_min_max(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - min) / (max - min)).collect()
}

/// `exp(epsilon·logprob)`, floored at the smallest positive double so a
/// very unlikely candidate still keeps a positive weight.
pub fn modulation(logprob: f64, epsilon: f64) -> f64 {
    (epsilon * logprob).exp().max(f64::MIN_POSITIVE)
}

/// Keep the `n_pred` best candidates. Equal log-probabilities are ordered by
/// text so the selection does not depend on input order.
pub fn select_candidates<'a>(candidates: &'a [Candidate], n_pred: usize) -> Vec<&'a Candidate> {
    let mut order: Vec<&Candidate> = candidates.iter().collect();
    order.sort_by(|a, b| {
        b.logprob
            .total_cmp(&a.logprob)
            .then_with(|| a.text.cmp(&b.text))
            .then_with(|| a.token_ids.cmp(&b.token_ids))
    });
    order.truncate(n_pred);
    order
}

/// Scaled and modulated per-doc scores of each selected candidate.
pub fn candidate_scores(index: &Bm25Index, selected: &[&Candidate], epsilon: f64) -> Vec<Vec<f64>> {
    selected
        .iter()
        .map(|c| {
            let m = modulation(c.logprob, epsilon);
            let raw = bm25_score(index, &split_words(&c.text));
            scale_min_max(&raw).into_iter().map(|s| s * m).collect()
        })
        .collect()
}

/// Fuse candidates into one ranking. Only items with a positive fused score
/// are ranked.
pub fn qrr_rank(index: &Bm25Index, candidates: &[Candidate], cfg: &FusionConfig) -> Result<RankedList> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Ok(RankedList::default());
    }
    let selected = select_candidates(candidates, cfg.n_pred);
    let per_cand = candidate_scores(index, &selected, cfg.epsilon);
    let ids = index.item_ids();
    let entries = match cfg.mode {
        FusionMode::MaxPool => {
            let mut fused = vec![0.0f64; ids.len()];
            for s in &per_cand {
                for (f, &v) in fused.iter_mut().zip(s) {
                    *f = f.max(v);
                }
            }
            ids.iter()
                .zip(fused)
                .filter(|(_, s)| *s > 0.0)
                .map(|(id, s)| (id.clone(), s))
                .collect()
        }
        FusionMode::RoundRobin => round_robin(ids, &per_cand),
    };
    RankedList::from_scores(entries)
}

fn round_robin(ids: &[String], per_cand: &[Vec<f64>]) -> Vec<(String, f64)> {
    let lists: Vec<Vec<usize>> = per_cand
        .iter()
        .map(|s| {
            let mut docs: Vec<usize> = (0..s.len()).filter(|&d| s[d] > 0.0).collect();
            docs.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then_with(|| ids[a].cmp(&ids[b])));
            docs
        })
        .collect();
    let mut taken = vec![false; ids.len()];
    let mut order = Vec::new();
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    for depth in 0..longest {
        for list in &lists {
            if let Some(&d) = list.get(depth) {
                if !taken[d] {
                    taken[d] = true;
                    order.push(d);
                }
            }
        }
    }
    let n = order.len() as f64;
    order
        .into_iter()
        .enumerate()
        .map(|(pos, d)| (ids[d].clone(), (n - pos as f64) / n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusDoc;

    fn index(texts: &[&str]) -> Bm25Index {
        let docs: Vec<CorpusDoc> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| CorpusDoc {
                item_id: format!("d{i}"),
                text: t.to_string(),
                tokens: split_words(t),
            })
            .collect();
        build_index(&docs, Bm25Params::default()).unwrap()
    }

    fn cand(text: &str, logprob: f64) -> Candidate {
        Candidate {
            text: text.into(),
            logprob,
            token_ids: vec![],
        }
    }

    #[test]
    fn ranked_list_ordering() {
        let r = RankedList::from_scores(vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)]).unwrap();
        let ids: Vec<&str> = r.entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert!(r.is_valid());
        assert_eq!(r.rank_of("b"), Some(3));
        assert_eq!(r.rank_of("z"), None);
        assert!(RankedList::from_scores(vec![("a".into(), 1.0), ("a".into(), 2.0)]).is_err());
    }

    #[test]
    fn scaling() {
        assert_eq!(scale_min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(scale_min_max(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn modulation_factor() {
        assert_eq!(modulation(0.0, 1.0 / 5000.0), 1.0);
        assert!((modulation(-5000.0, 1.0 / 5000.0) - (-1f64).exp()).abs() < 1e-15);
        assert!((modulation(-5000.0, 1.0 / 5000.0) - 0.3679).abs() < 1e-4);
        assert!(modulation(-1e9, 1.0 / 5000.0) > 0.0);
    }

    #[test]
    fn empty_candidates() {
        let idx = index(&["a b"]);
        assert!(qrr_rank(&idx, &[], &FusionConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn single_candidate_logprob_zero_is_scaled_bm25() {
        let idx = index(&["red sweater", "red socks", "blue shirt", "red red sweater wool"]);
        let r = qrr_rank(&idx, &[cand("red sweater", 0.0)], &FusionConfig::default()).unwrap();
        let raw = bm25_score(&idx, &split_words("red sweater"));
        let scaled = scale_min_max(&raw);
        for (id, s) in &r.entries {
            let d: usize = id[1..].parse().unwrap();
            assert_eq!(*s, scaled[d]);
        }
        assert_eq!(r.len(), scaled.iter().filter(|&&s| s > 0.0).count());
    }

    #[test]
    fn two_unique_matches_interleave() {
        let idx = index(&["alpha", "beta", "gamma"]);
        let r = qrr_rank(&idx, &[cand("alpha", -1.0), cand("beta", -2.0)], &FusionConfig::default()).unwrap();
        let eps: f64 = 1.0 / 5000.0;
        assert_eq!(r.entries[0], ("d0".to_string(), (-eps).exp()));
        assert_eq!(r.entries[1], ("d1".to_string(), (-2.0 * eps).exp()));
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn n_pred_truncates() {
        let idx = index(&["alpha", "beta", "gamma"]);
        let cfg = FusionConfig {
            n_pred: 1,
            ..Default::default()
        };
        let r = qrr_rank(&idx, &[cand("beta", -2.0), cand("alpha", -1.0)], &cfg).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.entries[0].0, "d0");
    }

    #[test]
    fn round_robin_alternates() {
        let idx = index(&["alpha x", "alpha", "beta y", "beta"]);
        let cfg = FusionConfig {
            mode: FusionMode::RoundRobin,
            ..Default::default()
        };
        let r = qrr_rank(&idx, &[cand("alpha", -1.0), cand("beta", -2.0)], &cfg).unwrap();
        let ids: Vec<&str> = r.entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(ids, ["d1", "d3", "d0", "d2"]);
        assert!(r.is_valid());
    }
}
