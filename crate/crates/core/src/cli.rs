//! Command-line verbs and the workdir artifact layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig, Stage};
use crate::corpus::{
    build_corpus_docs, build_sequences, dedup_items, parse_metadata, parse_reviews, resolve_sequences, CorpusDoc,
    InteractionSequence, Item, LineError, SequenceRecord, Split,
};
use crate::encoder::{checkpoint, Featurizer, ModelParams, Packer, Vocab};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, write_report, EvalOptions, EvalReport};
use crate::generation::{sample_candidates, Candidate};
use crate::objective::grad_check::{check_model_gradients, ModelGradReport, DEFAULT_EPS};
use crate::objective::StepStats;
use crate::pipeline::{build_vocab, fit, is_test_user, training_pairs};
use crate::retrieval::{bm25_score, build_index, store, Bm25Index, RankedList};
use crate::synthetic::{run_experiment, ExperimentReport};
use crate::{io, rng};

pub const ITEMS: &str = "items.jsonl";
pub const SEQUENCES: &str = "sequences.jsonl";
pub const CORPUS: &str = "corpus.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const PREPARE_STATS: &str = "prepare_stats.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const INDEX: &str = "index.bin";
pub const EVAL_DIR: &str = "eval";
pub const SYNTHETIC_REPORT: &str = "synthetic.json";
pub const GRADCHECK_REPORT: &str = "gradcheck.json";
pub const MANIFEST: &str = "manifest.json";

/// Environment variable holding the log filter (e.g. `info`, `seqrec=debug`).
pub const LOG_ENV: &str = "SEQREC_LOG";

#[derive(Debug, Parser)]
#[command(name = "seqrec", version, about = "Multimodal sequential recommendation pipeline")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory (overrides the config).
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Dotted config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse metadata and reviews into items, sequences, corpus and vocabulary.
    Prepare,
    /// Train the two-tower model on the training split.
    Train,
    /// Sample candidates for held-out histories.
    Generate {
        /// Only this user.
        #[arg(long)]
        user: Option<String>,
        /// At most this many users.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Build the BM25 index over the item corpus.
    Index,
    /// Rank held-out targets and write the metric report.
    Evaluate,
    /// Query the BM25 index with a raw string.
    Search {
        query: String,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Paired text-only vs text+image run on the image-disambiguation fixture.
    Synthetic,
    /// Compare analytic and finite-difference gradients on one training batch.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Generate { .. } => "generate",
            Command::Index => "index",
            Command::Evaluate => "evaluate",
            Command::Search { .. } => "search",
            Command::Synthetic => "synthetic",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Process exit status for an error: 2 for configuration problems, else 1.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_fingerprint: String,
    pub seed: u64,
    pub version: String,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

/// Per-verb provenance of the workdir artifacts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub items_kept: usize,
    pub items_dropped_no_image: usize,
    pub metadata_errors: Vec<LineError>,
    pub interactions: usize,
    pub review_errors: Vec<LineError>,
    pub sequences: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub corpus_docs: usize,
    pub vocab_size: usize,
    pub image_decoded: usize,
    pub image_fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserCandidates {
    pub user_id: String,
    pub candidates: Vec<Candidate>,
}

/// Resolve the run configuration from the global flags.
pub fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut sets = cli.sets.clone();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    let mut cfg = match &cli.config {
        Some(p) => config::load(p, &sets)?,
        None => {
            if cli.seed.is_none() {
                return Err(Error::Config("a seed is required (--seed or a config file)".into()));
            }
            config::from_toml_str("", &sets, Path::new("."))?
        }
    };
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = w.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let wd = cfg.paths.workdir.clone();
    std::fs::create_dir_all(&wd).map_err(|e| Error::io(&wd, e))?;
    let ws = Workspace { cfg: &cfg, dir: &wd };
    match &cli.command {
        Command::Prepare => ws.prepare(),
        Command::Train => ws.train(),
        Command::Generate { user, limit } => ws.generate(user.as_deref(), *limit),
        Command::Index => ws.index(),
        Command::Evaluate => ws.evaluate().map(|_| ()),
        Command::Search { query, top_k } => {
            for (id, s) in ws.search(query, *top_k)?.entries {
                println!("{id}\t{s:.6}");
            }
            Ok(())
        }
        Command::Synthetic => ws.synthetic().map(|_| ()),
        Command::Gradcheck {
            tol,
            per_tensor,
            batch,
        } => ws.gradcheck(*tol, *per_tensor, *batch).map(|_| ()),
    }
}

/// Artifact operations rooted at one workdir.
pub struct Workspace<'a> {
    pub cfg: &'a RunConfig,
    pub dir: &'a Path,
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

impl Workspace<'_> {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn hashes(&self, names: &[&str]) -> Result<BTreeMap<String, String>> {
        names
            .iter()
            .map(|n| Ok((n.to_string(), io::file_sha256(require(&self.path(n))?)?)))
            .collect()
    }

    fn record(&self, verb: &str, inputs: BTreeMap<String, String>, artifacts: &[&str]) -> Result<()> {
        let path = self.path(MANIFEST);
        let mut m: Manifest = if path.exists() { io::read_json(&path)? } else { Manifest::default() };
        m.stages.insert(
            verb.to_string(),
            StageRecord {
                config_fingerprint: self.cfg.fingerprint(),
                seed: self.cfg.seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                inputs,
                artifacts: self.hashes(artifacts)?,
            },
        );
        io::write_json(&path, &m)
    }

    pub fn items(&self) -> Result<Vec<Item>> {
        io::read_jsonl(require(&self.path(ITEMS))?)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::load(require(&self.path(VOCAB))?)
    }

    pub fn sequences(&self, items: &[Item], split: Split) -> Result<Vec<InteractionSequence>> {
        let recs: Vec<SequenceRecord> = io::read_jsonl(require(&self.path(SEQUENCES))?)?;
        resolve_sequences(&recs, items, split)
    }

    pub fn checkpoint(&self) -> Result<ModelParams> {
        checkpoint::load(require(&self.path(CHECKPOINT))?)
    }

    /// The persisted index, or one built from the corpus when absent.
    pub fn load_index(&self) -> Result<Bm25Index> {
        let p = self.path(INDEX);
        if p.exists() {
            return store::load(&p);
        }
        let docs: Vec<CorpusDoc> = io::read_jsonl(require(&self.path(CORPUS))?)?;
        build_index(&docs, self.cfg.bm25)
    }

    pub fn prepare(&self) -> Result<()> {
        let cfg = self.cfg;
        let meta_path = cfg
            .paths
            .metadata
            .as_deref()
            .ok_or_else(|| Error::Config("paths.metadata is not set".into()))?;
        let rev_path = cfg
            .paths
            .reviews
            .as_deref()
            .ok_or_else(|| Error::Config("paths.reviews is not set".into()))?;
        let meta = parse_metadata(io::open_lines(meta_path)?, &cfg.meta_fields)?;
        for e in &meta.errors {
            log::warn!("{}:{}: {}", meta_path.display(), e.line, e.message);
        }
        let reviews = parse_reviews(io::open_lines(rev_path)?, &cfg.review_fields)?;
        for e in &reviews.errors {
            log::warn!("{}:{}: {}", rev_path.display(), e.line, e.message);
        }
        let mut items = dedup_items(meta.records);
        let mut feat = Featurizer::new(cfg.model.d_img, cfg.seed_for(Stage::Image))?;
        feat.featurize_all(&mut items, cfg.paths.image_root.as_deref());

        let seqs = build_sequences(&reviews.records, &items, cfg.data.sequences, cfg.seed_for(Stage::Data))?;
        if seqs.is_empty() {
            return Err(Error::EmptyInput("user sequences".into()));
        }
        let split_seed = rng::derive(cfg.seed_for(Stage::Data), &[1]);
        let records: Vec<SequenceRecord> = seqs
            .iter()
            .map(|s| SequenceRecord {
                user_id: s.user_id.clone(),
                item_ids: s.items.iter().map(|i| i.item_id.clone()).collect(),
                split: if is_test_user(&s.user_id, cfg.data.test_fraction, split_seed) {
                    Split::Test
                } else {
                    Split::Train
                },
            })
            .collect();
        let corpus = build_corpus_docs(&items)?;
        let vocab = build_vocab(&items);

        io::write_jsonl(&self.path(ITEMS), &items)?;
        io::write_jsonl(&self.path(SEQUENCES), &records)?;
        io::write_jsonl(&self.path(CORPUS), &corpus)?;
        vocab.save(&self.path(VOCAB))?;
        let n_test = records.iter().filter(|r| r.split == Split::Test).count();
        let stats = PrepareStats {
            items_kept: items.len(),
            items_dropped_no_image: meta.dropped,
            metadata_errors: meta.errors,
            interactions: reviews.records.len(),
            review_errors: reviews.errors,
            sequences: records.len(),
            train_sequences: records.len() - n_test,
            test_sequences: n_test,
            corpus_docs: corpus.len(),
            vocab_size: vocab.len(),
            image_decoded: feat.decoded,
            image_fallbacks: feat.fallbacks,
        };
        io::write_json(&self.path(PREPARE_STATS), &stats)?;
        log::info!(
            "prepared {} items, {} sequences ({} test), vocabulary {}",
            stats.items_kept,
            stats.sequences,
            n_test,
            stats.vocab_size
        );
        let inputs = BTreeMap::from([
            ("metadata".to_string(), io::file_sha256(meta_path)?),
            ("reviews".to_string(), io::file_sha256(rev_path)?),
        ]);
        self.record("prepare", inputs, &[ITEMS, SEQUENCES, CORPUS, VOCAB, PREPARE_STATS])
    }

    pub fn train(&self) -> Result<()> {
        let cfg = self.cfg;
        let items = self.items()?;
        let vocab = self.vocab()?;
        let train = self.sequences(&items, Split::Train)?;
        if train.is_empty() {
            return Err(Error::EmptyInput("training split".into()));
        }
        let tcfg = crate::objective::TrainConfig {
            seed: cfg.seed_for(Stage::Train),
            ..cfg.train.clone()
        };
        let mut log_rows: Vec<StepStats> = Vec::new();
        let every = cfg.train.checkpoint_every;
        let (params, _) = fit(
            &cfg.model,
            &vocab,
            &train,
            cfg.text_only,
            &cfg.mix,
            &tcfg,
            cfg.seed_for(Stage::Init),
            |s, p| {
                log::info!("step {} loss {:.6} (nig {:.6} tt {:.6} ut {:.6})", s.step, s.loss, s.nig, s.tt, s.ut);
                log_rows.push(*s);
                match every {
                    Some(k) if k > 0 && s.step % k == 0 => {
                        checkpoint::save(p, &self.path(&format!("checkpoint-step{}.bin", s.step)))
                    }
                    _ => Ok(()),
                }
            },
        )?;
        checkpoint::save(&params, &self.path(CHECKPOINT))?;
        io::write_jsonl(&self.path(TRAIN_LOG), &log_rows)?;
        let inputs = self.hashes(&[ITEMS, SEQUENCES, VOCAB])?;
        self.record("train", inputs, &[CHECKPOINT, TRAIN_LOG])
    }

    fn test_users(&self, items: &[Item]) -> Result<Vec<InteractionSequence>> {
        let mut test = self.sequences(items, Split::Test)?;
        test.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        if let Some(k) = self.cfg.eval.max_users {
            test.truncate(k);
        }
        if test.is_empty() {
            return Err(Error::EmptyInput("test split".into()));
        }
        Ok(test)
    }

    pub fn generate(&self, user: Option<&str>, limit: Option<usize>) -> Result<()> {
        let params = self.checkpoint()?;
        let vocab = self.vocab()?;
        let items = self.items()?;
        let mut test = self.test_users(&items)?;
        if let Some(u) = user {
            test.retain(|s| s.user_id == u);
            if test.is_empty() {
                return Err(Error::Invalid(format!("no held-out sequence for user `{u}`")));
            }
        }
        if let Some(k) = limit {
            test.truncate(k);
        }
        let packer = Packer::new(&vocab, params.config.d_img).text_only(self.cfg.text_only);
        let base_seed = self.cfg.seed_for(Stage::Generation);
        let out = test
            .iter()
            .map(|s| {
                let prompt = packer.pack_history(s.history())?;
                let gen = crate::generation::GenConfig {
                    seed: rng::derive_str(base_seed, &s.user_id),
                    ..self.cfg.generation.clone()
                };
                Ok(UserCandidates {
                    user_id: s.user_id.clone(),
                    candidates: sample_candidates(&params, &vocab, &prompt, &gen)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        io::write_jsonl(&self.path(CANDIDATES), &out)?;
        let inputs = self.hashes(&[CHECKPOINT, ITEMS, SEQUENCES, VOCAB])?;
        self.record("generate", inputs, &[CANDIDATES])
    }

    pub fn index(&self) -> Result<()> {
        let docs: Vec<CorpusDoc> = io::read_jsonl(require(&self.path(CORPUS))?)?;
        let idx = build_index(&docs, self.cfg.bm25)?;
        store::save(&idx, &self.path(INDEX))?;
        log::info!("indexed {} docs, {} terms, {} postings", idx.num_docs(), idx.num_terms(), idx.nnz());
        let inputs = self.hashes(&[CORPUS])?;
        self.record("index", inputs, &[INDEX])
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        let params = self.checkpoint()?;
        let vocab = self.vocab()?;
        let items = self.items()?;
        let index = self.load_index()?;
        let test = self.test_users(&items)?;
        let opts = EvalOptions {
            fusion: self.cfg.fusion,
            seed: self.cfg.seed_for(Stage::Generation),
            mrr_cap: self.cfg.eval.mrr_cap,
            config_fingerprint: self.cfg.fingerprint(),
        };
        let report = evaluate_run(
            &params,
            &vocab,
            &index,
            &test,
            &self.cfg.generation,
            self.cfg.text_only,
            &opts,
        )?;
        let dir = self.path(EVAL_DIR);
        write_report(&report, &dir)?;
        println!(
            "recall@1 {:.4}  recall@10 {:.4}  mrr {:.4}  ndcg@10 {:.4}  ({} users)",
            report.recall_at_1, report.recall_at_10, report.mrr, report.ndcg_at_10, report.n_users
        );
        let mut inputs = self.hashes(&[CHECKPOINT, ITEMS, SEQUENCES, VOCAB])?;
        let idx_input = if self.path(INDEX).exists() { INDEX } else { CORPUS };
        inputs.extend(self.hashes(&[idx_input])?);
        let names = ["report.json", "metrics.csv", "per_user.jsonl"].map(|n| format!("{EVAL_DIR}/{n}"));
        self.record("evaluate", inputs, &names.iter().map(String::as_str).collect::<Vec<_>>())?;
        Ok(report)
    }

    pub fn search(&self, query: &str, top_k: usize) -> Result<RankedList> {
        let idx = self.load_index()?;
        let scores = bm25_score(&idx, &crate::encoder::vocab::split_words(query));
        let entries = idx
            .item_ids()
            .iter()
            .zip(scores)
            .filter(|(_, s)| *s > 0.0)
            .map(|(id, s)| (id.clone(), s))
            .collect();
        let mut ranked = RankedList::from_scores(entries)?;
        ranked.entries.truncate(top_k);
        Ok(ranked)
    }

    pub fn synthetic(&self) -> Result<ExperimentReport> {
        let report = run_experiment(&self.cfg.synthetic)?;
        io::write_json(&self.path(SYNTHETIC_REPORT), &report)?;
        for (name, m) in [("text+image", &report.image), ("text-only", &report.text_only)] {
            println!(
                "{name:<11} recall@1 {:.4}  recall@10 {:.4}  mrr {:.4}  ndcg@10 {:.4}",
                m.recall_at_1, m.recall_at_10, m.mrr, m.ndcg_at_10
            );
        }
        println!("images help: {}", report.image_helps);
        self.record("synthetic", BTreeMap::new(), &[SYNTHETIC_REPORT])?;
        Ok(report)
    }

    pub fn gradcheck(&self, tol: f64, per_tensor: usize, batch: usize) -> Result<ModelGradReport> {
        let items = self.items()?;
        let vocab = self.vocab()?;
        let train = self.sequences(&items, Split::Train)?;
        let take: Vec<InteractionSequence> = train.into_iter().take(batch.max(1)).collect();
        if take.is_empty() {
            return Err(Error::EmptyInput("training split".into()));
        }
        let model = crate::encoder::ModelConfig {
            vocab_size: vocab.len(),
            ..self.cfg.model.clone()
        };
        let params = ModelParams::init(&model, self.cfg.seed_for(Stage::Init), self.cfg.train.mode)?;
        let packer = Packer::new(&vocab, model.d_img).text_only(self.cfg.text_only);
        let pairs = training_pairs(&packer, &take)?;
        let report = check_model_gradients(&params, &pairs, &self.cfg.mix, per_tensor, DEFAULT_EPS, self.cfg.seed)?;
        io::write_json(&self.path(GRADCHECK_REPORT), &report)?;
        println!(
            "max relative error {:.3e} over {} coordinates (worst: {})",
            report.max_rel_error, report.coords_checked, report.worst_tensor
        );
        if report.max_rel_error > tol {
            return Err(Error::Invalid(format!(
                "gradient check failed: {:.3e} > {tol:.1e}",
                report.max_rel_error
            )));
        }
        Ok(report)
    }
}
