//! Run configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{MetaFieldMap, ReviewFieldMap, SequenceConfig};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::generation::GenConfig;
use crate::objective::{MixConfig, TrainConfig};
use crate::retrieval::{Bm25Params, FusionConfig};
use crate::synthetic::SyntheticConfig;
use crate::{io, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub metadata: Option<PathBuf>,
    pub reviews: Option<PathBuf>,
    /// Directory of local image files named by the item image reference.
    pub image_root: Option<PathBuf>,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            metadata: None,
            reviews: None,
            image_root: None,
            workdir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sequences: SequenceConfig,
    /// Share of users held out for evaluation.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sequences: SequenceConfig::default(),
            test_fraction: 0.2,
        }
    }
}

/// Per-stage seeds; unset ones derive from the run seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: Option<u64>,
    pub image: Option<u64>,
    pub init: Option<u64>,
    pub train: Option<u64>,
    pub generation: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Image,
    Init,
    Train,
    Generation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Reciprocal rank counts only up to this rank when set.
    pub mrr_cap: Option<usize>,
    /// Evaluate at most this many test users (in user id order).
    pub max_users: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub text_only: bool,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub meta_fields: MetaFieldMap,
    #[serde(default)]
    pub review_fields: ReviewFieldMap,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub generation: GenConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub bm25: Bm25Params,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            text_only: false,
            paths: Paths::default(),
            meta_fields: MetaFieldMap::default(),
            review_fields: ReviewFieldMap::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            mix: MixConfig::default(),
            train: TrainConfig::default(),
            generation: GenConfig::default(),
            fusion: FusionConfig::default(),
            bm25: Bm25Params::default(),
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
            synthetic: SyntheticConfig::default(),
        }
    }

    pub fn seed_for(&self, stage: Stage) -> u64 {
        let (explicit, tag) = match stage {
            Stage::Data => (self.seeds.data, 1),
            Stage::Image => (self.seeds.image, 2),
            Stage::Init => (self.seeds.init, 3),
            Stage::Train => (self.seeds.train, 4),
            Stage::Generation => (self.seeds.generation, 5),
        };
        explicit.unwrap_or_else(|| rng::derive(self.seed, &[tag]))
    }

    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        self.train.validate()?;
        self.generation.validate()?;
        self.fusion.validate()?;
        if self.fusion.n_pred > self.generation.n_return {
            return Err(Error::Config(format!(
                "fusion.n_pred ({}) exceeds generation.n_return ({})",
                self.fusion.n_pred, self.generation.n_return
            )));
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        for p in [&self.paths.metadata, &self.paths.reviews, &self.paths.image_root]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("path does not exist: {}", p.display())));
            }
        }
        Ok(())
    }

    /// Hash of everything that affects results; the `paths` section is left
    /// out so relocated runs share a fingerprint (inputs are hashed separately).
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        io::sha256_hex(v.to_string().as_bytes())
    }
}

/// Parse `key=value`; the value is read as a TOML literal, falling back to a
/// plain string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

pub fn apply_override(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Build a config from TOML text and overrides. Relative paths resolve
/// against `base_dir`.
pub fn from_toml_str(text: &str, overrides: &[String], base_dir: &Path) -> Result<RunConfig> {
    let mut table: toml::Table =
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        apply_override(&mut table, &k, v)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base_dir.join(&*p);
        }
    };
    if let Some(p) = cfg.paths.metadata.as_mut() {
        resolve(p);
    }
    if let Some(p) = cfg.paths.reviews.as_mut() {
        resolve(p);
    }
    if let Some(p) = cfg.paths.image_root.as_mut() {
        resolve(p);
    }
    resolve(&mut cfg.paths.workdir);
    Ok(cfg)
}

pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    from_toml_str(&text, overrides, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert!(from_toml_str("", &[], Path::new(".")).is_err());
        let c = from_toml_str("seed = 3", &[], Path::new("/tmp")).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.generation.n_return, 32);
        assert_eq!(c.paths.workdir, Path::new("/tmp/work"));
    }

    #[test]
    fn overrides() {
        let sets = vec![
            "mix.alpha=0.5".to_string(),
            "generation.n_return = 40".to_string(),
            "train.mode=full".to_string(),
            "fusion.mode=\"round_robin\"".to_string(),
            "eval.mrr_cap=10".to_string(),
        ];
        let c = from_toml_str("seed = 1\n[mix]\nbeta = 0.1\n", &sets, Path::new(".")).unwrap();
        assert_eq!(c.mix.alpha, 0.5);
        assert_eq!(c.mix.beta, 0.1);
        assert_eq!(c.generation.n_return, 40);
        assert_eq!(c.train.mode, crate::encoder::TrainMode::Full);
        assert_eq!(c.fusion.mode, crate::retrieval::FusionMode::RoundRobin);
        assert_eq!(c.eval.mrr_cap, Some(10));
        assert!(from_toml_str("seed = 1", &["nokey".into()], Path::new(".")).is_err());
        assert!(from_toml_str("seed = 1", &["mix.bogus=1".into()], Path::new(".")).is_err());
        assert!(from_toml_str("seed = 1", &["seed.x=1".into()], Path::new(".")).is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::with_seed(1);
        assert!(c.validate().is_ok());
        c.fusion.n_pred = 33;
        assert!(c.validate().is_err());
        let mut c = RunConfig::with_seed(1);
        c.paths.metadata = Some(PathBuf::from("/definitely/not/here.jsonl"));
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_paths() {
        let a = RunConfig::with_seed(1);
        let mut b = a.clone();
        b.paths.workdir = PathBuf::from("/elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.mix.alpha = 0.2;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.seed_for(Stage::Data), a.seed_for(Stage::Train));
    }
}
