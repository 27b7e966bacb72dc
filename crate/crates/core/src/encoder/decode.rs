//! Incremental evaluation-mode decoding with a per-layer key/value cache.

use ndarray::{s, Array1, Array2, ArrayView1};

use super::pack::PackedSequence;
use super::params::{LinearIdx, ModelParams, NormIdx};
use super::tape::{gelu, normalize_rows};
use super::vocab::IMG;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct LayerCache {
    keys: Vec<Array1<f64>>,
    values: Vec<Array1<f64>>,
}

#[derive(Clone, Debug)]
pub struct Decoder<'p> {
    params: &'p ModelParams,
    layers: Vec<LayerCache>,
}

impl<'p> Decoder<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        let layers = params
            .layout
            .blocks
            .iter()
            .map(|_| LayerCache {
                keys: Vec::new(),
                values: Vec::new(),
            })
            .collect();
        Self { params, layers }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn linear(&self, idx: &LinearIdx, x: ArrayView1<f64>) -> Array1<f64> {
        let p = self.params;
        let mut y = p.value(idx.weight).dot(&x);
        if let Some(b) = idx.bias {
            y += &p.value(b).row(0);
        }
        if let Some((a, b)) = idx.lora {
            let h = p.value(a).dot(&x);
            y += &(p.value(b).dot(&h) * p.config.lora.scaling());
        }
        y
    }

    fn norm(&self, idx: NormIdx, x: &Array1<f64>) -> Array1<f64> {
        let row = x.view().insert_axis(ndarray::Axis(0));
        let (xhat, _) = normalize_rows(row);
        let p = self.params;
        &xhat.row(0) * &p.value(idx.gamma).row(0) + p.value(idx.beta).row(0)
    }

    /// Append one token (with image features for IMG positions) and return the
    /// final hidden state at that position.
    pub fn feed(&mut self, token: u32, image: Option<&[f64]>) -> Result<Array1<f64>> {
        let p = self.params;
        let cfg = &p.config;
        let pos = self.len();
        if pos >= cfg.max_len {
            return Err(Error::Invalid(format!("decode position {pos} exceeds max_len")));
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::Invalid(format!("token id {token} outside vocabulary")));
        }
        let lay = &p.layout;
        let mut x = match (token, image) {
            (IMG, Some(f)) => self.linear(&lay.image_proj, ArrayView1::from(f)),
            _ => p.value(lay.tok_emb).row(token as usize).to_owned(),
        };
        x += &p.value(lay.pos_emb).row(pos);

        let heads = cfg.n_heads;
        let dh = cfg.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, blk) in lay.blocks.iter().enumerate() {
            let h = self.norm(blk.ln1, &x);
            let q = self.linear(&blk.q, h.view());
            let k = self.linear(&blk.k, h.view());
            let v = self.linear(&blk.v, h.view());
            self.layers[l].keys.push(k);
            self.layers[l].values.push(v);
            let cache = &self.layers[l];
            let mut att = Array1::zeros(cfg.d_model);
            for hd in 0..heads {
                let cols = s![hd * dh..(hd + 1) * dh];
                let qh = q.slice(cols);
                let scores: Vec<f64> = cache
                    .keys
                    .iter()
                    .map(|k| qh.dot(&k.slice(cols)) * scale)
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = w.iter().sum();
                let mut out = att.slice_mut(cols);
                for (wi, v) in w.iter().zip(&cache.values) {
                    out.scaled_add(wi / sum, &v.slice(cols));
                }
            }
            x += &self.linear(&blk.o, att.view());
            let h = self.norm(blk.ln2, &x);
            let f = self.linear(&blk.fc1, h.view()).mapv(gelu);
            x += &self.linear(&blk.fc2, f.view());
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("block {l}")));
            }
        }
        Ok(self.norm(lay.ln_f, &x))
    }

    pub fn logits(&self, hidden: &Array1<f64>) -> Array1<f64> {
        self.linear(&self.params.layout.lm_head, hidden.view())
    }

    /// Feed a whole packed prompt and return the logits after its last token.
    pub fn prefill(&mut self, packed: &PackedSequence) -> Result<Array1<f64>> {
        let mut slots = packed.image_slots.iter().peekable();
        let mut last = None;
        for (i, &tok) in packed.token_ids.iter().enumerate() {
            let img = match slots.peek() {
                Some(s) if s.position == i => slots.next().map(|s| s.features.as_slice()),
                _ => None,
            };
            last = Some(self.feed(tok, img)?);
        }
        let h = last.ok_or_else(|| Error::Invalid("empty prompt".into()))?;
        Ok(self.logits(&h))
    }
}

/// Full-sequence logits via the incremental path (used to cross-check).
pub fn decode_all(params: &ModelParams, packed: &PackedSequence) -> Result<Array2<f64>> {
    let mut dec = Decoder::new(params);
    let mut slots = packed.image_slots.iter().peekable();
    let mut rows = Array2::zeros((packed.len(), params.config.vocab_size));
    for (i, &tok) in packed.token_ids.iter().enumerate() {
        let img = match slots.peek() {
            Some(s) if s.position == i => slots.next().map(|s| s.features.as_slice()),
            _ => None,
        };
        let h = dec.feed(tok, img)?;
        rows.row_mut(i).assign(&dec.logits(&h));
    }
    Ok(rows)
}
