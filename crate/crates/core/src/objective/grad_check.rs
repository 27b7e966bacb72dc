//! Central finite-difference verification of analytic gradients.

use rand::Rng as _;
use serde::Serialize;

use super::train::{batch_loss, Pair};
use super::MixConfig;
use crate::encoder::ModelParams;
use crate::error::Result;
use crate::rng;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + eps;
            let hi = f(&x);
            x[i] = point[i] - eps;
            let lo = f(&x);
            x[i] = point[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between `analytic` and central differences of `f` over
/// the selected coordinates of `theta`.
pub fn grad_check<F>(mut f: F, theta: &[f64], analytic: &[f64], coords: &[usize], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = theta.to_vec();
    coords
        .iter()
        .map(|&i| {
            x[i] = theta[i] + eps;
            let hi = f(&x);
            x[i] = theta[i] - eps;
            let lo = f(&x);
            x[i] = theta[i];
            relative_error(analytic[i], (hi - lo) / (2.0 * eps))
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub coords_checked: usize,
}

/// Check the full mixed-loss gradient of a model on one batch, sampling
/// `per_tensor` coordinates from each trainable tensor. Dropout is off.
pub fn check_model_gradients(
    params: &ModelParams,
    batch: &[Pair],
    mix: &MixConfig,
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<ModelGradReport> {
    let graph = batch_loss(params, batch, mix, None)?;
    let grads = graph.gradients(params);
    let mut probe = params.clone();
    let mut r = rng::seeded(seed);
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (ti, p) in params.tensors.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let (rows, cols) = p.value.dim();
        for _ in 0..per_tensor.min(rows * cols) {
            let (i, j) = (r.random_range(0..rows), r.random_range(0..cols));
            let orig = p.value[[i, j]];
            probe.tensors[ti].value[[i, j]] = orig + eps;
            let hi = batch_loss(&probe, batch, mix, None)?.parts.total;
            probe.tensors[ti].value[[i, j]] = orig - eps;
            let lo = batch_loss(&probe, batch, mix, None)?.parts.total;
            probe.tensors[ti].value[[i, j]] = orig;
            let err = relative_error(grads[ti][[i, j]], (hi - lo) / (2.0 * eps));
            if err > worst.0 {
                worst = (err, p.name.clone());
            }
            checked += 1;
        }
    }
    Ok(ModelGradReport {
        max_rel_error: worst.0,
        worst_tensor: worst.1,
        coords_checked: checked,
    })
}
