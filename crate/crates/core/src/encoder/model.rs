//! Forward pass of the toy multimodal causal encoder and the two-tower pooling.

use ndarray::Array2;

use super::lora::dropout_mask;
use super::pack::PackedSequence;
use super::params::{LinearIdx, ModelParams, NormIdx};
use super::tape::{Tape, Var};
use super::vocab::{PAD, SEP};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Projected tower vectors plus the full-pack next-token logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TowerOutputs {
    pub v_u: Vec<f64>,
    pub v_t_given_u: Vec<f64>,
    pub v_t: Vec<f64>,
    pub next_token_logits: Array2<f64>,
}

/// Tape variables of one (full, target-only) pair.
#[derive(Clone, Copy, Debug)]
pub struct TowerVars {
    pub v_u: Var,
    pub v_t_given_u: Var,
    pub v_t: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub hidden: Var,
    pub logits: Option<Var>,
}

/// Parameters bound as tape leaves, indexed like `ModelParams::tensors`.
pub struct Bound<'p> {
    pub params: &'p ModelParams,
    pub vars: Vec<Var>,
}

impl<'p> Bound<'p> {
    pub fn new(params: &'p ModelParams, tape: &mut Tape) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Self { params, vars }
    }

    fn linear(&self, tape: &mut Tape, idx: &LinearIdx, x: Var, rng: &mut Option<&mut Rng>) -> Var {
        let mut y = tape.matmul_nt(x, self.vars[idx.weight]);
        if let Some(b) = idx.bias {
            y = tape.add_row(y, self.vars[b]);
        }
        if let Some((a, b)) = idx.lora {
            let lora = &self.params.config.lora;
            let xin = match rng {
                Some(r) if lora.dropout > 0.0 => {
                    let mask = dropout_mask(tape.value(x).dim(), lora.dropout, r);
                    tape.mul_const(x, mask)
                }
                _ => x,
            };
            let h = tape.matmul_nt(xin, self.vars[a]);
            let h = tape.matmul_nt(h, self.vars[b]);
            let h = tape.scale(h, lora.scaling());
            y = tape.add(y, h);
        }
        y
    }

    fn norm(&self, tape: &mut Tape, idx: NormIdx, x: Var) -> Var {
        tape.layer_norm(x, self.vars[idx.gamma], self.vars[idx.beta])
    }

    /// Run the encoder over one packed sequence. Dropout on adapter inputs is
    /// active only when `rng` is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        packed: &PackedSequence,
        mut rng: Option<&mut Rng>,
        with_logits: bool,
    ) -> Result<Forward> {
        let cfg = &self.params.config;
        let lay = &self.params.layout;
        let n = packed.len();
        if n == 0 {
            return Err(Error::Invalid("empty sequence".into()));
        }
        if n > cfg.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {n} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let ids: Vec<usize> = packed.token_ids.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary")));
        }
        let mut x = tape.gather(self.vars[lay.tok_emb], ids);
        if !packed.image_slots.is_empty() {
            let mut feats = Array2::zeros((packed.image_slots.len(), cfg.d_img));
            for (r, slot) in packed.image_slots.iter().enumerate() {
                if slot.features.len() != cfg.d_img {
                    return Err(Error::Invalid(format!(
                        "image slot at {} has {} features, expected {}",
                        slot.position,
                        slot.features.len(),
                        cfg.d_img
                    )));
                }
                feats.row_mut(r).assign(&ndarray::ArrayView1::from(&slot.features[..]));
            }
            let f = tape.leaf(feats);
            let img = self.linear(tape, &lay.image_proj, f, &mut None);
            let rows = packed.image_slots.iter().map(|s| s.position).collect();
            x = tape.scatter_rows(x, img, rows);
        }
        let pos = tape.gather(self.vars[lay.pos_emb], (0..n).collect());
        x = tape.add(x, pos);
        check_finite(tape, x, "embeddings")?;

        for (l, blk) in lay.blocks.iter().enumerate() {
            let h = self.norm(tape, blk.ln1, x);
            let q = self.linear(tape, &blk.q, h, &mut rng);
            let k = self.linear(tape, &blk.k, h, &mut rng);
            let v = self.linear(tape, &blk.v, h, &mut rng);
            let a = tape.causal_attention(q, k, v, cfg.n_heads);
            let o = self.linear(tape, &blk.o, a, &mut rng);
            x = tape.add(x, o);
            let h = self.norm(tape, blk.ln2, x);
            let f = self.linear(tape, &blk.fc1, h, &mut rng);
            let f = tape.gelu(f);
            let f = self.linear(tape, &blk.fc2, f, &mut rng);
            x = tape.add(x, f);
            check_finite(tape, x, &format!("block {l}"))?;
        }
        let hidden = self.norm(tape, lay.ln_f, x);
        let logits = if with_logits {
            let lg = self.linear(tape, &lay.lm_head, hidden, &mut rng);
            check_finite(tape, lg, "lm_head")?;
            Some(lg)
        } else {
            None
        };
        Ok(Forward { hidden, logits })
    }

    pub fn project(&self, tape: &mut Tape, head: Head, pooled: Var) -> Var {
        let idx = match head {
            Head::User => &self.params.layout.user_head,
            Head::Item => &self.params.layout.item_head,
        };
        self.linear(tape, idx, pooled, &mut None)
    }

    /// Both towers for one training pair.
    pub fn towers(
        &self,
        tape: &mut Tape,
        full: &PackedSequence,
        target_only: &PackedSequence,
        mut rng: Option<&mut Rng>,
    ) -> Result<TowerVars> {
        let spans = PoolSpans::of_full(full)?;
        let f = self.forward(tape, full, rng.as_deref_mut(), true)?;
        let hu = tape.mean_rows(f.hidden, spans.history);
        let ht = tape.mean_rows(f.hidden, spans.target);
        let v_u = self.project(tape, Head::User, hu);
        let v_t_given_u = self.project(tape, Head::Item, ht);

        let t = self.forward(tape, target_only, rng, false)?;
        let rows = PoolSpans::content_rows(target_only);
        if rows.is_empty() {
            return Err(Error::Invalid("target-only pack has no content".into()));
        }
        let h = tape.mean_rows(t.hidden, rows);
        let v_t = self.project(tape, Head::Item, h);
        Ok(TowerVars {
            v_u,
            v_t_given_u,
            v_t,
            logits: f.logits.expect("requested"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    User,
    Item,
}

/// Row sets pooled for the history and target representations. SEP and PAD
/// belong to neither.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSpans {
    pub history: Vec<usize>,
    pub target: Vec<usize>,
}

impl PoolSpans {
    pub fn of_full(packed: &PackedSequence) -> Result<Self> {
        let sep = packed
            .sep_pos
            .ok_or_else(|| Error::Invalid("full pack has no separator".into()))?;
        let keep = |i: &usize| packed.token_ids[*i] != PAD && packed.token_ids[*i] != SEP;
        let history: Vec<usize> = (0..sep).filter(keep).collect();
        let target: Vec<usize> = (sep + 1..packed.len()).filter(keep).collect();
        if history.is_empty() || target.is_empty() {
            return Err(Error::Invalid("empty history or target span".into()));
        }
        Ok(Self { history, target })
    }

    pub fn content_rows(packed: &PackedSequence) -> Vec<usize> {
        (0..packed.len())
            .filter(|&i| packed.token_ids[i] != PAD && packed.token_ids[i] != SEP)
            .collect()
    }
}

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(layer.to_string()))
    }
}

/// Evaluation-mode towers for one (full, target-only) pair.
pub fn forward_and_pool(
    params: &ModelParams,
    packed: &PackedSequence,
    target_only: &PackedSequence,
) -> Result<TowerOutputs> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape);
    let tv = bound.towers(&mut tape, packed, target_only, None)?;
    let row = |v: Var| tape.value(v).row(0).to_vec();
    Ok(TowerOutputs {
        v_u: row(tv.v_u),
        v_t_given_u: row(tv.v_t_given_u),
        v_t: row(tv.v_t),
        next_token_logits: tape.value(tv.logits).clone(),
    })
}

/// Evaluation-mode hidden states and logits for one sequence.
pub fn forward_eval(params: &ModelParams, packed: &PackedSequence) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut tape = Tape::new();
    let bound = Bound::new(params, &mut tape);
    let f = bound.forward(&mut tape, packed, None, true)?;
    Ok((
        tape.value(f.hidden).clone(),
        tape.value(f.logits.expect("requested")).clone(),
    ))
}
