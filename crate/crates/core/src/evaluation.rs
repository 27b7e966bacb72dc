//! Ranking metrics over held-out sequences and the evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::InteractionSequence;
use crate::error::{Error, Result};
use crate::generation::{CandidateGenerator, GenConfig, ModelGenerator};
use crate::retrieval::{qrr_rank, Bm25Index, FusionConfig, RankedList};
use crate::encoder::{ModelParams, Vocab};
use crate::{io, rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub rr: f64,
    pub ndcg_at_10: f64,
}

/// Metrics for a single relevant item at 1-based rank `rank`. With
/// `mrr_cap = Some(k)` reciprocal rank is zero beyond rank k.
pub fn metrics_for_rank(rank: Option<usize>, mrr_cap: Option<usize>) -> Metrics {
    let Some(r) = rank else {
        return Metrics::default();
    };
    let hit = |k: usize| if r <= k { 1.0 } else { 0.0 };
    let rr = match mrr_cap {
        Some(k) if r > k => 0.0,
        _ => 1.0 / r as f64,
    };
    Metrics {
        recall_at_1: hit(1),
        recall_at_10: hit(10),
        rr,
        ndcg_at_10: if r <= 10 { 1.0 / ((r + 1) as f64).log2() } else { 0.0 },
    }
}

pub fn rank_metrics(ranked: &RankedList, target_item_id: &str) -> Metrics {
    metrics_for_rank(ranked.rank_of(target_item_id), None)
}

/// Target rank, serialized as a number or the string "unranked".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetRank {
    Ranked(usize),
    Unranked,
}

impl TargetRank {
    pub fn rank(self) -> Option<usize> {
        match self {
            TargetRank::Ranked(r) => Some(r),
            TargetRank::Unranked => None,
        }
    }
}

impl Serialize for TargetRank {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TargetRank::Ranked(r) => s.serialize_u64(*r as u64),
            TargetRank::Unranked => s.serialize_str("unranked"),
        }
    }
}

impl<'de> Deserialize<'de> for TargetRank {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => n
                .as_u64()
                .filter(|&r| r >= 1)
                .map(|r| TargetRank::Ranked(r as usize))
                .ok_or_else(|| serde::de::Error::custom("rank must be a positive integer")),
            serde_json::Value::String(s) if s == "unranked" => Ok(TargetRank::Unranked),
            other => Err(serde::de::Error::custom(format!("invalid rank {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub target_item_id: String,
    pub rank: TargetRank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub mrr: f64,
    pub ndcg_at_10: f64,
    pub n_users: usize,
    pub config_fingerprint: String,
    pub seed: u64,
    pub per_user: Vec<UserRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub fusion: FusionConfig,
    pub seed: u64,
    pub mrr_cap: Option<usize>,
    pub config_fingerprint: String,
}

/// Mean metrics over per-user records, which are sorted by user id first.
pub fn aggregate(mut per_user: Vec<UserRecord>, opts: &EvalOptions) -> Result<EvalReport> {
    if per_user.is_empty() {
        return Err(Error::EmptyInput("test set".into()));
    }
    per_user.sort_by(|a, b| a.user_id.cmp(&b.user_id).then_with(|| a.target_item_id.cmp(&b.target_item_id)));
    let n = per_user.len() as f64;
    let mut sum = Metrics::default();
    for rec in &per_user {
        let m = metrics_for_rank(rec.rank.rank(), opts.mrr_cap);
        sum.recall_at_1 += m.recall_at_1;
        sum.recall_at_10 += m.recall_at_10;
        sum.rr += m.rr;
        sum.ndcg_at_10 += m.ndcg_at_10;
    }
    Ok(EvalReport {
        recall_at_1: sum.recall_at_1 / n,
        recall_at_10: sum.recall_at_10 / n,
        mrr: sum.rr / n,
        ndcg_at_10: sum.ndcg_at_10 / n,
        n_users: per_user.len(),
        config_fingerprint: opts.config_fingerprint.clone(),
        seed: opts.seed,
        per_user,
    })
}

/// Rank each test sequence's held-out target from candidates proposed for its
/// history. Each user's generation seed derives from the run seed and user id.
pub fn evaluate_with(
    generator: &dyn CandidateGenerator,
    index: &Bm25Index,
    test: &[InteractionSequence],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.fusion.validate()?;
    if test.is_empty() {
        return Err(Error::EmptyInput("test set".into()));
    }
    let per_user = test
        .par_iter()
        .map(|seq| {
            if seq.n() < 2 {
                return Err(Error::Invalid(format!("sequence of `{}` has no history", seq.user_id)));
            }
            let seed = rng::derive_str(opts.seed, &seq.user_id);
            let cands = generator.generate(seq.history(), seed)?;
            let ranked = qrr_rank(index, &cands, &opts.fusion)?;
            let target = &seq.target().item_id;
            Ok(UserRecord {
                user_id: seq.user_id.clone(),
                target_item_id: target.clone(),
                rank: ranked.rank_of(target).map_or(TargetRank::Unranked, TargetRank::Ranked),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(per_user, opts)
}

pub fn evaluate_run(
    params: &ModelParams,
    vocab: &Vocab,
    index: &Bm25Index,
    test: &[InteractionSequence],
    gen: &GenConfig,
    text_only: bool,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if gen.n_return < opts.fusion.n_pred {
        return Err(Error::Config(format!(
            "n_pred ({}) exceeds n_return ({})",
            opts.fusion.n_pred, gen.n_return
        )));
    }
    let generator = ModelGenerator {
        params,
        vocab,
        cfg: gen.clone(),
        text_only,
    };
    evaluate_with(&generator, index, test, opts)
}

pub fn metrics_csv(report: &EvalReport) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in [
        ("recall@1", report.recall_at_1),
        ("recall@10", report.recall_at_10),
        ("mrr", report.mrr),
        ("ndcg@10", report.ndcg_at_10),
    ] {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// Write `report.json`, `metrics.csv` and `per_user.jsonl` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_json(&dir.join("report.json"), report)?;
    let csv = dir.join("metrics.csv");
    std::fs::write(&csv, metrics_csv(report)).map_err(|e| Error::io(&csv, e))?;
    io::write_jsonl(&dir.join("per_user.jsonl"), &report.per_user)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked(ids: &[&str]) -> RankedList {
        let n = ids.len() as f64;
        RankedList::from_scores(ids.iter().enumerate().map(|(i, id)| (id.to_string(), n - i as f64)).collect())
            .unwrap()
    }

    #[test]
    fn hand_table() {
        let r = ranked(&["a", "b", "c", "d"]);
        let m = rank_metrics(&r, "a");
        assert_eq!((m.recall_at_1, m.recall_at_10, m.rr, m.ndcg_at_10), (1.0, 1.0, 1.0, 1.0));
        let m = rank_metrics(&r, "c");
        assert_eq!((m.recall_at_1, m.recall_at_10, m.rr, m.ndcg_at_10), (0.0, 1.0, 1.0 / 3.0, 0.5));
        assert_eq!(rank_metrics(&r, "zz"), Metrics::default());
    }

    #[test]
    fn beyond_ten_and_cap() {
        let m = metrics_for_rank(Some(11), None);
        assert_eq!((m.recall_at_10, m.ndcg_at_10), (0.0, 0.0));
        assert_eq!(m.rr, 1.0 / 11.0);
        assert_eq!(metrics_for_rank(Some(11), Some(10)).rr, 0.0);
        assert_eq!(metrics_for_rank(Some(10), Some(10)).rr, 0.1);
    }

    #[test]
    fn three_user_aggregate() {
        let rec = |u: &str, r| UserRecord {
            user_id: u.into(),
            target_item_id: "t".into(),
            rank: r,
        };
        let recs = vec![
            rec("u1", TargetRank::Ranked(1)),
            rec("u2", TargetRank::Ranked(4)),
            rec("u3", TargetRank::Unranked),
        ];
        let rep = aggregate(recs.clone(), &EvalOptions::default()).unwrap();
        assert!((rep.recall_at_10 - 2.0 / 3.0).abs() < 1e-12);
        assert!((rep.mrr - 0.41667).abs() < 1e-5);
        assert!((rep.mrr - 1.25 / 3.0).abs() < 1e-12);
        let mut rev = recs;
        rev.reverse();
        assert_eq!(aggregate(rev, &EvalOptions::default()).unwrap(), rep);
        assert!(aggregate(vec![], &EvalOptions::default()).is_err());
    }

    #[test]
    fn rank_serialization() {
        let s = serde_json::to_string(&[TargetRank::Ranked(3), TargetRank::Unranked]).unwrap();
        assert_eq!(s, r#"[3,"unranked"]"#);
        let back: Vec<TargetRank> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, [TargetRank::Ranked(3), TargetRank::Unranked]);
        assert!(serde_json::from_str::<TargetRank>("0").is_err());
    }

    #[test]
    fn csv_format() {
        let rep = aggregate(
            vec![UserRecord {
                user_id: "u".into(),
                target_item_id: "t".into(),
                rank: TargetRank::Ranked(1),
            }],
            &EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(metrics_csv(&rep), "metric,value\nrecall@1,1\nrecall@10,1\nmrr,1\nndcg@10,1\n");
    }
}
