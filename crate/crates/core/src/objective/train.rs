use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{infonce_loss_with_grad, nig_loss_with_grad};
use super::{AdamW, MixConfig, TrainConfig};
use crate::encoder::tape::{Tape, Var};
use crate::encoder::{Bound, ModelParams, PackedSequence};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// A (history+target, target-only) training pair.
pub type Pair = (PackedSequence, PackedSequence);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub nig: f64,
    pub tt: f64,
    pub ut: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub nig: f64,
    pub tt: f64,
    pub ut: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

/// Recorded forward pass of the mixed loss over one batch.
pub struct LossGraph {
    pub tape: Tape,
    /// Tape variable of each parameter tensor.
    pub param_vars: Vec<Var>,
    pub root: Var,
    pub parts: LossParts,
}

impl LossGraph {
    /// Gradients for every tensor (zeros where the loss does not reach).
    pub fn gradients(&self, params: &ModelParams) -> Vec<Array2<f64>> {
        let mut g = self.tape.backward(self.root);
        self.param_vars
            .iter()
            .zip(&params.tensors)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Array2::zeros(p.value.dim())))
            .collect()
    }
}

/// Build the mixed loss for a batch. Adapter dropout runs only with `rng`.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[Pair],
    mix: &MixConfig,
    mut rng: Option<&mut Rng>,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape);
    let n = batch.len() as f64;
    let mut nig_terms = Vec::with_capacity(batch.len());
    let (mut vu, mut vtu, mut vt) = (Vec::new(), Vec::new(), Vec::new());
    for (full, target) in batch {
        let tv = bound.towers(&mut tape, full, target, rng.as_deref_mut())?;
        let (l, g) = nig_loss_with_grad(tape.value(tv.logits).view(), &full.token_ids, &full.loss_mask)?;
        nig_terms.push((tape.scalar_fn(l, vec![tv.logits], vec![g]), 1.0 / n));
        vu.push(tv.v_u);
        vtu.push(tv.v_t_given_u);
        vt.push(tv.v_t);
    }
    let nig = tape.weighted_sum(nig_terms);
    let vu = tape.stack_rows(vu);
    let vtu = tape.stack_rows(vtu);
    let vt = tape.stack_rows(vt);

    let (l, ga, gb) = infonce_loss_with_grad(tape.value(vtu).view(), tape.value(vt).view(), mix.tau_c)?;
    let tt = tape.scalar_fn(l, vec![vtu, vt], vec![ga, gb]);
    let (l, ga, gb) = infonce_loss_with_grad(tape.value(vu).view(), tape.value(vt).view(), mix.tau_c)?;
    let ut = tape.scalar_fn(l, vec![vu, vt], vec![ga, gb]);

    let root = tape.weighted_sum(vec![(nig, mix.nig_weight()), (tt, mix.alpha), (ut, mix.beta)]);
    let parts = LossParts {
        total: tape.scalar(root),
        nig: tape.scalar(nig),
        tt: tape.scalar(tt),
        ut: tape.scalar(ut),
    };
    let param_vars = bound.vars;
    Ok(LossGraph {
        tape,
        param_vars,
        root,
        parts,
    })
}

/// One optimizer step on one batch.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamW,
    batch: &[Pair],
    mix: &MixConfig,
    tcfg: &TrainConfig,
    rng: &mut Rng,
    batch_id: usize,
) -> Result<StepStats> {
    let graph = batch_loss(params, batch, mix, Some(rng))?;
    let p = graph.parts;
    if ![p.total, p.nig, p.tt, p.ut].iter().all(|v| v.is_finite()) {
        log::error!("non-finite loss in batch {batch_id}: {p:?}");
        return Err(Error::NonFinite(format!(
            "mixed loss in batch {batch_id} (L={}, NIG={}, TT={}, UT={})",
            p.total, p.nig, p.tt, p.ut
        )));
    }
    let all = graph.gradients(params);
    let mut grads: Vec<Option<Array2<f64>>> = all
        .into_iter()
        .zip(&params.tensors)
        .map(|(g, t)| t.trainable.then_some(g))
        .collect();
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient in batch {batch_id}")));
    }
    if norm > tcfg.grad_clip {
        let s = tcfg.grad_clip / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    opt.step(params, &grads, tcfg);
    Ok(StepStats {
        step: opt.steps as usize,
        loss: p.total,
        nig: p.nig,
        tt: p.tt,
        ut: p.ut,
        grad_norm: norm,
        lr: tcfg.learning_rate,
    })
}

/// Train over shuffled mini-batches. `max_steps`, when set, takes precedence
/// over `epochs` and cycles through the data as needed.
pub fn train<F>(
    params: &mut ModelParams,
    pairs: &[Pair],
    mix: &MixConfig,
    tcfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<StepStats>>
where
    F: FnMut(&StepStats, &ModelParams) -> Result<()>,
{
    mix.validate()?;
    tcfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    let mut opt = AdamW::new(params);
    let mut dropout = rng::seeded(rng::derive(tcfg.seed, &[1]));
    let batches_per_epoch = pairs.len().div_ceil(mix.batch_size);
    let total = tcfg
        .max_steps
        .unwrap_or(tcfg.epochs * batches_per_epoch);
    let mut stats = Vec::with_capacity(total);
    let mut epoch = 0u64;
    while stats.len() < total {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng::seeded(rng::derive(tcfg.seed, &[2, epoch])));
        for (b, chunk) in order.chunks(mix.batch_size).enumerate() {
            if stats.len() >= total {
                break;
            }
            let batch: Vec<Pair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let batch_id = epoch as usize * batches_per_epoch + b;
            let s = train_step(params, &mut opt, &batch, mix, tcfg, &mut dropout, batch_id)?;
            on_step(&s, params)?;
            stats.push(s);
        }
        epoch += 1;
    }
    Ok(stats)
}
