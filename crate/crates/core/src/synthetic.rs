//! Image-disambiguation fixture and the paired text-only vs text+image run.
//!
//! Items come in pairs whose members share every text field and differ only
//! in their image. Pairs are grouped; a user's latent (group, member) decides
//! the history, and the target's group depends on the member as well, so the
//! history text alone leaves the target group ambiguous while the history
//! images resolve it.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_corpus_docs, InteractionSequence, Item};
use crate::encoder::{ModelConfig, TrainMode};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, EvalOptions};
use crate::generation::GenConfig;
use crate::objective::{MixConfig, TrainConfig};
use crate::pipeline::{build_vocab, fit};
use crate::retrieval::{build_index, Bm25Params, FusionConfig};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub groups: usize,
    pub pairs_per_group: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub mix: MixConfig,
    pub train: TrainConfig,
    pub generation: GenConfig,
    pub fusion: FusionConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            groups: 5,
            pairs_per_group: 5,
            n_train: 400,
            n_test: 100,
            history_min: 2,
            history_max: 4,
            seeds: vec![1, 2, 3],
            model: ModelConfig::default(),
            mix: MixConfig::default(),
            train: TrainConfig {
                learning_rate: 3e-3,
                max_steps: Some(300),
                mode: TrainMode::Full,
                ..TrainConfig::default()
            },
            generation: GenConfig {
                max_new_tokens: 32,
                ..GenConfig::default()
            },
            fusion: FusionConfig::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 2 || self.pairs_per_group == 0 {
            return Err(Error::Config("need at least two groups of one pair".into()));
        }
        if self.model.d_img < 2 * self.groups {
            return Err(Error::Config(format!(
                "d_img {} cannot hold {} orthogonal image styles",
                self.model.d_img,
                2 * self.groups
            )));
        }
        if self.history_min == 0 || self.history_max < self.history_min {
            return Err(Error::Config("invalid history length range".into()));
        }
        if self.n_train == 0 || self.n_test == 0 || self.seeds.is_empty() {
            return Err(Error::Config("empty synthetic split or seed list".into()));
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.groups * self.pairs_per_group
    }
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub items: Vec<Item>,
    pub train: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
}

pub fn item_id(pair: usize, member: usize) -> String {
    format!("S{pair:02}{}", if member == 0 { 'a' } else { 'b' })
}

fn make_item(cfg: &SyntheticConfig, pair: usize, member: usize) -> Item {
    let group = pair / cfg.pairs_per_group;
    let mut feats = vec![0.0; cfg.model.d_img];
    feats[2 * group + member] = 1.0;
    Item {
        item_id: item_id(pair, member),
        title: format!("model p{pair:02}"),
        category: "Synthetic".into(),
        brand: format!("maker{group}"),
        price: "10.00".into(),
        image_ref: format!("synthetic/{}.png", item_id(pair, member)),
        image_features: feats,
    }
}

fn make_user(cfg: &SyntheticConfig, items: &[Item], user_id: String, r: &mut Rng) -> InteractionSequence {
    let g = r.random_range(0..cfg.groups);
    let m = r.random_range(0..2);
    let len = r.random_range(cfg.history_min..=cfg.history_max);
    let pick = |group: usize, r: &mut Rng| {
        let pair = group * cfg.pairs_per_group + r.random_range(0..cfg.pairs_per_group);
        items[2 * pair + m].clone()
    };
    let mut seq: Vec<Item> = (0..len).map(|_| pick(g, r)).collect();
    let h = (g + 1 + m) % cfg.groups;
    seq.push(pick(h, r));
    InteractionSequence { user_id, items: seq }
}

pub fn build_fixture(cfg: &SyntheticConfig, seed: u64) -> Result<Fixture> {
    cfg.validate()?;
    let items: Vec<Item> = (0..cfg.n_pairs())
        .flat_map(|p| [make_item(cfg, p, 0), make_item(cfg, p, 1)])
        .collect();
    let mut r = rng::seeded(rng::derive(seed, &[10]));
    let train = (0..cfg.n_train)
        .map(|i| make_user(cfg, &items, format!("train{i:04}"), &mut r))
        .collect();
    let test = (0..cfg.n_test)
        .map(|i| make_user(cfg, &items, format!("test{i:04}"), &mut r))
        .collect();
    Ok(Fixture { items, train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub text_only: bool,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub mrr: f64,
    pub ndcg_at_10: f64,
    pub final_loss: f64,
}

/// Train and evaluate one arm on the fixture built from `seed`.
pub fn run_one(cfg: &SyntheticConfig, seed: u64, text_only: bool) -> Result<RunResult> {
    let fx = build_fixture(cfg, seed)?;
    let vocab = build_vocab(&fx.items);
    let tcfg = TrainConfig {
        seed: rng::derive(seed, &[11]),
        ..cfg.train.clone()
    };
    let (params, stats) = fit(
        &cfg.model,
        &vocab,
        &fx.train,
        text_only,
        &cfg.mix,
        &tcfg,
        rng::derive(seed, &[12]),
        |_, _| Ok(()),
    )?;
    let index = build_index(&build_corpus_docs(&fx.items)?, Bm25Params::default())?;
    let opts = EvalOptions {
        fusion: cfg.fusion,
        seed: rng::derive(seed, &[13]),
        mrr_cap: None,
        config_fingerprint: String::new(),
    };
    let rep = evaluate_run(&params, &vocab, &index, &fx.test, &cfg.generation, text_only, &opts)?;
    Ok(RunResult {
        seed,
        text_only,
        recall_at_1: rep.recall_at_1,
        recall_at_10: rep.recall_at_10,
        mrr: rep.mrr,
        ndcg_at_10: rep.ndcg_at_10,
        final_loss: stats.last().map_or(f64::NAN, |s| s.loss),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub recall_at_1: f64,
    pub recall_at_10: f64,
    pub mrr: f64,
    pub ndcg_at_10: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub image: MeanMetrics,
    pub text_only: MeanMetrics,
    /// Recall@10 strictly higher and Recall@1 no lower with images.
    pub image_helps: bool,
}

fn mean(runs: &[&RunResult]) -> MeanMetrics {
    let n = runs.len() as f64;
    let sum = |f: fn(&RunResult) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
    MeanMetrics {
        recall_at_1: sum(|r| r.recall_at_1),
        recall_at_10: sum(|r| r.recall_at_10),
        mrr: sum(|r| r.mrr),
        ndcg_at_10: sum(|r| r.ndcg_at_10),
    }
}

/// Both arms for every seed, run in parallel.
pub fn run_experiment(cfg: &SyntheticConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let arms: Vec<(u64, bool)> = cfg.seeds.iter().flat_map(|&s| [(s, false), (s, true)]).collect();
    let runs = arms
        .par_iter()
        .map(|&(s, t)| {
            let r = run_one(cfg, s, t);
            if let Ok(r) = &r {
                log::info!(
                    "seed {s} {}: recall@1 {:.3} recall@10 {:.3} loss {:.4}",
                    if t { "text-only" } else { "text+image" },
                    r.recall_at_1,
                    r.recall_at_10,
                    r.final_loss
                );
            }
            r
        })
        .collect::<Result<Vec<_>>>()?;
    let image = mean(&runs.iter().filter(|r| !r.text_only).collect::<Vec<_>>());
    let text_only = mean(&runs.iter().filter(|r| r.text_only).collect::<Vec<_>>());
    Ok(ExperimentReport {
        image_helps: image.recall_at_10 > text_only.recall_at_10 && image.recall_at_1 >= text_only.recall_at_1,
        runs,
        image,
        text_only,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn fixture_shape() {
        let cfg = SyntheticConfig::default();
        let fx = build_fixture(&cfg, 4).unwrap();
        assert_eq!(fx.items.len(), 50);
        assert_eq!((fx.train.len(), fx.test.len()), (400, 100));
        let texts: HashSet<String> = fx
            .items
            .iter()
            .map(|i| crate::corpus::flatten_item(i, true))
            .collect();
        assert_eq!(texts.len(), 25);
        for pair in fx.items.chunks(2) {
            let dot: f64 = pair[0].image_features.iter().zip(&pair[1].image_features).map(|(a, b)| a * b).sum();
            assert_eq!(dot, 0.0);
            assert_eq!(pair[0].title, pair[1].title);
        }
        for s in fx.train.iter().chain(&fx.test) {
            assert!((3..=5).contains(&s.n()));
            let member = |it: &Item| it.item_id.ends_with('b');
            assert!(s.items.iter().all(|it| member(it) == member(&s.items[0])));
        }
    }

    #[test]
    fn fixture_is_seeded() {
        let cfg = SyntheticConfig::default();
        let a = build_fixture(&cfg, 1).unwrap();
        let b = build_fixture(&cfg, 1).unwrap();
        let c = build_fixture(&cfg, 2).unwrap();
        let ids = |f: &Fixture| f.train.iter().map(|s| s.items.len()).collect::<Vec<_>>();
        assert_eq!(a.train, b.train);
        assert_ne!(ids(&a).iter().zip(ids(&c)).filter(|(x, y)| **x != *y).count(), 0);
    }

    #[test]
    fn config_checks() {
        let mut cfg = SyntheticConfig::default();
        cfg.model.d_img = 8;
        assert!(cfg.validate().is_err());
        let cfg = SyntheticConfig {
            history_min: 3,
            history_max: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
