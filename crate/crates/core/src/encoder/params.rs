//! Model configuration, parameter storage and the frozen/trainable partition.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lora::{init_adapter, LoraConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub d_img: usize,
    pub proj_dim: usize,
    /// Reuse the token embedding as the LM head weight.
    pub tie_lm_head: bool,
    pub lora: LoraConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 512,
            d_img: 27,
            proj_dim: 128,
            tie_lm_head: false,
            lora: LoraConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 7 {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_img < 4 || self.max_len == 0 || self.proj_dim == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive (d_img >= 4)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Base,
    Adapter,
    /// User/item projection heads, always trained fully.
    Head,
    ImageProj,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Adapters, projection heads and the image projection train; the rest is frozen.
    #[default]
    Adapters,
    /// Everything trains.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub trainable: bool,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearIdx {
    pub weight: usize,
    pub bias: Option<usize>,
    /// (A, B)
    pub lora: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIdx {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIdx {
    pub ln1: NormIdx,
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    pub ln2: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

/// Index of every tensor role into [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub image_proj: LinearIdx,
    pub blocks: Vec<BlockIdx>,
    pub ln_f: NormIdx,
    pub lm_head: LinearIdx,
    pub user_head: LinearIdx,
    pub item_head: LinearIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Param>,
    pub layout: Layout,
}

struct Builder<'a> {
    tensors: Vec<Param>,
    rng: &'a mut Rng,
    lora: LoraConfig,
}

impl Builder<'_> {
    fn push(&mut self, name: String, value: Array2<f64>, kind: ParamKind) -> usize {
        self.tensors.push(Param {
            name,
            value,
            trainable: false,
            kind,
        });
        self.tensors.len() - 1
    }

    fn normal(&mut self, shape: (usize, usize), std: f64) -> Array2<f64> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_fn(shape, |_| dist.sample(self.rng))
    }

    fn linear(
        &mut self,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        bias: bool,
        adapted: bool,
        kind: ParamKind,
    ) -> Result<LinearIdx> {
        let w = self.normal((d_out, d_in), std);
        let weight = self.push(format!("{name}.weight"), w, kind);
        let bias = bias.then(|| self.push(format!("{name}.bias"), Array2::zeros((1, d_out)), kind));
        let lora = if adapted {
            let (a, b) = init_adapter(d_in, d_out, &self.lora, self.rng)?;
            Some((
                self.push(format!("{name}.lora_a"), a, ParamKind::Adapter),
                self.push(format!("{name}.lora_b"), b, ParamKind::Adapter),
            ))
        } else {
            None
        };
        Ok(LinearIdx { weight, bias, lora })
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        NormIdx {
            gamma: self.push(format!("{name}.gamma"), Array2::ones((1, d)), ParamKind::Base),
            beta: self.push(format!("{name}.beta"), Array2::zeros((1, d)), ParamKind::Base),
        }
    }
}

impl ModelParams {
    /// Random initialization. Adapters start with B = 0 so the adapted model
    /// equals the base model until trained.
    pub fn init(config: &ModelConfig, seed: u64, mode: TrainMode) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = rng::seeded(seed);
        let mut b = Builder {
            tensors: Vec::new(),
            rng: &mut rng,
            lora: c.lora,
        };
        let d = c.d_model;
        let lin_std = 1.0 / (d as f64).sqrt();
        let resid_std = lin_std / (2.0 * c.n_layers as f64).sqrt();

        let tok = b.normal((c.vocab_size, d), 0.1);
        let tok_emb = b.push("tok_emb".into(), tok, ParamKind::Base);
        let pos = b.normal((c.max_len, d), 0.1);
        let pos_emb = b.push("pos_emb".into(), pos, ParamKind::Base);
        let image_proj = b.linear(
            "image_proj",
            c.d_img,
            d,
            0.3,
            true,
            false,
            ParamKind::ImageProj,
        )?;
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let base = ParamKind::Base;
            blocks.push(BlockIdx {
                ln1: b.norm(&p("ln1"), d),
                q: b.linear(&p("q"), d, d, lin_std, true, true, base)?,
                k: b.linear(&p("k"), d, d, lin_std, true, false, base)?,
                v: b.linear(&p("v"), d, d, lin_std, true, true, base)?,
                o: b.linear(&p("o"), d, d, resid_std, true, false, base)?,
                ln2: b.norm(&p("ln2"), d),
                fc1: b.linear(&p("fc1"), d, c.d_ff, lin_std, true, false, base)?,
                fc2: b.linear(
                    &p("fc2"),
                    c.d_ff,
                    d,
                    1.0 / (c.d_ff as f64).sqrt() / (2.0 * c.n_layers as f64).sqrt(),
                    true,
                    false,
                    base,
                )?,
            });
        }
        let ln_f = b.norm("ln_f", d);
        let lm_head = if c.tie_lm_head {
            let (a, bb) = init_adapter(d, c.vocab_size, &c.lora, b.rng)?;
            LinearIdx {
                weight: tok_emb,
                bias: None,
                lora: Some((
                    b.push("lm_head.lora_a".into(), a, ParamKind::Adapter),
                    b.push("lm_head.lora_b".into(), bb, ParamKind::Adapter),
                )),
            }
        } else {
            b.linear("lm_head", d, c.vocab_size, lin_std, false, true, ParamKind::Base)?
        };
        let user_head = b.linear("user_head", d, c.proj_dim, lin_std, true, false, ParamKind::Head)?;
        let item_head = b.linear("item_head", d, c.proj_dim, lin_std, true, false, ParamKind::Head)?;

        let mut params = ModelParams {
            config: config.clone(),
            tensors: b.tensors,
            layout: Layout {
                tok_emb,
                pos_emb,
                image_proj,
                blocks,
                ln_f,
                lm_head,
                user_head,
                item_head,
            },
        };
        params.set_train_mode(mode);
        Ok(params)
    }

    pub fn set_train_mode(&mut self, mode: TrainMode) {
        for p in &mut self.tensors {
            p.trainable = match mode {
                TrainMode::Full => true,
                TrainMode::Adapters => p.kind != ParamKind::Base,
            };
        }
    }

    pub fn value(&self, idx: usize) -> &Array2<f64> {
        &self.tensors[idx].value
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|p| p.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// The same model with every adapter removed.
    pub fn base_model(&self) -> ModelParams {
        let mut remap = vec![usize::MAX; self.tensors.len()];
        let mut tensors = Vec::new();
        for (i, p) in self.tensors.iter().enumerate() {
            if p.kind != ParamKind::Adapter {
                remap[i] = tensors.len();
                tensors.push(p.clone());
            }
        }
        let r = |i: usize| remap[i];
        let lin = |l: &LinearIdx| LinearIdx {
            weight: r(l.weight),
            bias: l.bias.map(r),
            lora: None,
        };
        let norm = |n: &NormIdx| NormIdx {
            gamma: r(n.gamma),
            beta: r(n.beta),
        };
        let l = &self.layout;
        ModelParams {
            config: self.config.clone(),
            tensors,
            layout: Layout {
                tok_emb: r(l.tok_emb),
                pos_emb: r(l.pos_emb),
                image_proj: lin(&l.image_proj),
                blocks: l
                    .blocks
                    .iter()
                    .map(|b| BlockIdx {
                        ln1: norm(&b.ln1),
                        q: lin(&b.q),
                        k: lin(&b.k),
                        v: lin(&b.v),
                        o: lin(&b.o),
                        ln2: norm(&b.ln2),
                        fc1: lin(&b.fc1),
                        fc2: lin(&b.fc2),
                    })
                    .collect(),
                ln_f: norm(&l.ln_f),
                lm_head: lin(&l.lm_head),
                user_head: lin(&l.user_head),
                item_head: lin(&l.item_head),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn adapters_start_at_zero_and_partition_holds() {
        let p = ModelParams::init(&cfg(), 0, TrainMode::Adapters).unwrap();
        for t in &p.tensors {
            if t.name.ends_with("lora_b") {
                assert!(t.value.iter().all(|&v| v == 0.0));
            }
            assert_eq!(t.trainable, t.kind != ParamKind::Base, "{}", t.name);
        }
        let adapted: Vec<_> = p
            .tensors
            .iter()
            .filter(|t| t.name.ends_with("lora_a"))
            .map(|t| t.name.as_str())
            .collect();
        assert_eq!(
            adapted,
            [
                "blocks.0.q.lora_a",
                "blocks.0.v.lora_a",
                "blocks.1.q.lora_a",
                "blocks.1.v.lora_a",
                "lm_head.lora_a"
            ]
        );
        assert_eq!(p.value(p.layout.user_head.weight).dim(), (128, 64));
    }

    #[test]
    fn full_mode_trains_everything() {
        let p = ModelParams::init(&cfg(), 0, TrainMode::Full).unwrap();
        assert!(p.tensors.iter().all(|t| t.trainable));
    }

    #[test]
    fn tied_head_shares_embedding() {
        let c = ModelConfig {
            tie_lm_head: true,
            ..cfg()
        };
        let p = ModelParams::init(&c, 0, TrainMode::Adapters).unwrap();
        assert_eq!(p.layout.lm_head.weight, p.layout.tok_emb);
        assert!(p.find("lm_head.weight").is_none());
    }

    #[test]
    fn base_model_drops_adapters() {
        let p = ModelParams::init(&cfg(), 3, TrainMode::Adapters).unwrap();
        let base = p.base_model();
        assert!(base.tensors.iter().all(|t| t.kind != ParamKind::Adapter));
        assert_eq!(
            base.value(base.layout.blocks[1].q.weight),
            p.value(p.layout.blocks[1].q.weight)
        );
    }

    #[test]
    fn bad_heads_rejected() {
        let c = ModelConfig {
            n_heads: 5,
            ..cfg()
        };
        assert!(ModelParams::init(&c, 0, TrainMode::Adapters).is_err());
    }
}
