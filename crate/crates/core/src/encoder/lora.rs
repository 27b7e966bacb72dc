//! Low-rank adapters: `W·x + (alpha/r)·B·(A·drop(x))` on a frozen `W`.

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 8.0,
            dropout: 0.1,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        if self.rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "adapter rank {} exceeds min(d_in={d_in}, d_out={d_out})",
                self.rank
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("adapter dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Fresh adapter pair: A (r×d_in) uniform in ±1/√d_in, B (d_out×r) zero.
pub fn init_adapter(d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut Rng) -> Result<(Array2<f64>, Array2<f64>)> {
    cfg.validate(d_in, d_out)?;
    let bound = 1.0 / (d_in as f64).sqrt();
    let a = Array2::from_shape_fn((cfg.rank, d_in), |_| rng.random_range(-bound..bound));
    let b = Array2::zeros((d_out, cfg.rank));
    Ok((a, b))
}

/// Inverted-dropout mask scaled by 1/(1-p).
pub fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// A standalone adapted linear layer. `weight` stays frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    /// d_out × d_in
    pub weight: Array2<f64>,
    /// r × d_in
    pub a: Array2<f64>,
    /// d_out × r
    pub b: Array2<f64>,
    pub scaling: f64,
    pub dropout: f64,
}

pub fn lora_wrap(weight: Array2<f64>, cfg: &LoraConfig, rng: &mut Rng) -> Result<LoraLinear> {
    let (d_out, d_in) = weight.dim();
    let (a, b) = init_adapter(d_in, d_out, cfg, rng)?;
    Ok(LoraLinear {
        weight,
        a,
        b,
        scaling: cfg.scaling(),
        dropout: cfg.dropout,
    })
}

impl LoraLinear {
    /// Apply to row vectors `x` (n × d_in). Dropout is active only when an RNG
    /// is supplied.
    pub fn forward(&self, x: ArrayView2<f64>, rng: Option<&mut Rng>) -> Array2<f64> {
        let base = x.dot(&self.weight.t());
        let dropped;
        let xin = match rng {
            Some(r) if self.dropout > 0.0 => {
                dropped = &x * &dropout_mask(x.dim(), self.dropout, r);
                dropped.view()
            }
            _ => x,
        };
        let delta = xin.dot(&self.a.t()).dot(&self.b.t()) * self.scaling;
        base + delta
    }
}
