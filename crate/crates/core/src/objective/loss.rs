//! Next-item generation loss, in-batch InfoNCE and the mixed objective, each
//! with its analytic gradient.

use ndarray::{Array2, ArrayView2};

use super::MixConfig;
use crate::error::{Error, Result};

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean over masked positions `j` of `-log softmax(logits[j-1])[token_ids[j]]`.
pub fn nig_loss(logits: ArrayView2<f64>, token_ids: &[u32], loss_mask: &[bool]) -> Result<f64> {
    nig_loss_with_grad(logits, token_ids, loss_mask).map(|(l, _)| l)
}

/// Loss plus its gradient with respect to the logits.
pub fn nig_loss_with_grad(
    logits: ArrayView2<f64>,
    token_ids: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, Array2<f64>)> {
    if token_ids.len() != loss_mask.len() || logits.nrows() < token_ids.len() {
        return Err(Error::Invalid("logits, ids and mask lengths disagree".into()));
    }
    let positions: Vec<usize> = (0..loss_mask.len()).filter(|&j| loss_mask[j]).collect();
    if positions.is_empty() {
        return Err(Error::Invalid("loss mask selects no positions".into()));
    }
    if positions[0] == 0 {
        return Err(Error::Invalid("position 0 has no preceding context".into()));
    }
    let count = positions.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for &j in &positions {
        let row = logits.row(j - 1);
        let target = token_ids[j] as usize;
        if target >= row.len() {
            return Err(Error::Invalid(format!("token {target} outside logits width")));
        }
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[target];
        let mut g = grad.row_mut(j - 1);
        for (k, &x) in row.iter().enumerate() {
            g[k] += (x - lse).exp() / count;
        }
        g[target] -= 1.0 / count;
    }
    let loss = total / count;
    if !loss.is_finite() {
        return Err(Error::NonFinite("next-item loss".into()));
    }
    Ok((loss, grad))
}

fn normalized_rows(x: ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Invalid(format!("{what} row {i} has zero or non-finite norm")));
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

fn normalize_backward(unit: &Array2<f64>, norms: &[f64], d_unit: &Array2<f64>) -> Array2<f64> {
    let mut dx = d_unit.clone();
    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
        let u = unit.row(i);
        let proj = u.dot(&row);
        row.scaled_add(-proj, &u);
        row /= norms[i];
    }
    dx
}

/// In-batch InfoNCE: for each i the positive is `cos(a_i, b_i)` and the
/// denominator runs over `a_j` against the fixed `b_i`.
pub fn infonce_loss(a: ArrayView2<f64>, b: ArrayView2<f64>, tau: f64) -> Result<f64> {
    infonce_loss_with_grad(a, b, tau).map(|(l, _, _)| l)
}

pub fn infonce_loss_with_grad(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(Error::Invalid(format!(
            "InfoNCE inputs must share a non-empty shape, got {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (an, a_norm) = normalized_rows(a, "first")?;
    let (bn, b_norm) = normalized_rows(b, "second")?;
    let nb = a.nrows();
    // sim[j, i] = cos(a_j, b_i) / tau
    let sim = an.dot(&bn.t()) / tau;
    let mut d_sim = Array2::zeros((nb, nb));
    let mut total = 0.0;
    for i in 0..nb {
        let col = sim.column(i);
        let lse = log_sum_exp(col.iter().copied());
        total += lse - sim[[i, i]];
        for j in 0..nb {
            d_sim[[j, i]] = (sim[[j, i]] - lse).exp() / nb as f64;
        }
        d_sim[[i, i]] -= 1.0 / nb as f64;
    }
    let loss = total / nb as f64;
    let d_an = d_sim.dot(&bn) / tau;
    let d_bn = d_sim.t().dot(&an) / tau;
    Ok((
        loss,
        normalize_backward(&an, &a_norm, &d_an),
        normalize_backward(&bn, &b_norm, &d_bn),
    ))
}

/// `(1 - alpha - beta)·nig + alpha·l_tt + beta·l_ut`.
pub fn mixed_loss(nig: f64, l_tt: f64, l_ut: f64, cfg: &MixConfig) -> f64 {
    // Same value as (1-α-β)·nig + α·tt + β·ut, arranged so equal inputs come
    // back unchanged.
    nig + cfg.alpha * (l_tt - nig) + cfg.beta * (l_ut - nig)
}

/// Gradient of [`mixed_loss`] with respect to `(nig, l_tt, l_ut)`.
pub fn mixed_loss_grad(cfg: &MixConfig) -> [f64; 3] {
    [cfg.nig_weight(), cfg.alpha, cfg.beta]
}
