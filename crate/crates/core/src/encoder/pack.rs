//! Prompt packing: history prefix, per-item cues, separator and target.

use crate::corpus::{flatten_item, Item};
use crate::error::{Error, Result};

use super::vocab::{Vocab, BOS, EOS, IMG, SEP};

pub const USER_PREFIX: &str = "This is the summary of a user’s purchase history.";
pub const FIRST_ITEM_CUE: &str = "The first item bought is as follows.";
pub const NEXT_ITEM_CUE: &str = "The next item bought is as follows.";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlot {
    pub position: usize,
    pub features: Vec<f64>,
}

/// Model-ready token sequence with aligned image features.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedSequence {
    pub token_ids: Vec<u32>,
    pub image_slots: Vec<ImageSlot>,
    /// Separator index; `None` for target-only packs.
    pub sep_pos: Option<usize>,
    /// True only on target-item text tokens (after SEP, including EOS).
    pub loss_mask: Vec<bool>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Index of the last history token.
    pub fn m(&self) -> Option<usize> {
        self.sep_pos.map(|s| s - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("packed sequence: {m}")));
        if self.loss_mask.len() != self.token_ids.len() {
            return bad("loss mask length mismatch");
        }
        let seps: Vec<usize> = positions(&self.token_ids, SEP);
        match self.sep_pos {
            Some(p) if seps != [p] => return bad("separator position mismatch"),
            None if !seps.is_empty() => return bad("unexpected separator"),
            _ => {}
        }
        let imgs = positions(&self.token_ids, IMG);
        let slots: Vec<usize> = self.image_slots.iter().map(|s| s.position).collect();
        if imgs != slots {
            return bad("image slots do not match image tokens");
        }
        let first_target = self.sep_pos.map_or(usize::MAX, |p| p + 1);
        if self
            .loss_mask
            .iter()
            .enumerate()
            .any(|(i, &m)| m && (i < first_target || self.token_ids[i] == IMG))
        {
            return bad("loss mask covers history or image tokens");
        }
        Ok(())
    }
}

fn positions(ids: &[u32], tok: u32) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|(_, &t)| t == tok)
        .map(|(i, _)| i)
        .collect()
}

/// Packs items against a fixed vocabulary.
#[derive(Clone, Copy, Debug)]
pub struct Packer<'a> {
    pub vocab: &'a Vocab,
    pub d_img: usize,
    /// Replace every image feature by the same constant vector.
    pub text_only: bool,
}

struct Builder {
    ids: Vec<u32>,
    slots: Vec<ImageSlot>,
    mask: Vec<bool>,
}

impl Builder {
    fn new() -> Self {
        Self {
            ids: vec![BOS],
            slots: Vec::new(),
            mask: vec![false],
        }
    }

    fn push(&mut self, id: u32, in_loss: bool) {
        self.ids.push(id);
        self.mask.push(in_loss && id != IMG);
    }

    fn finish(self, sep_pos: Option<usize>) -> PackedSequence {
        PackedSequence {
            token_ids: self.ids,
            image_slots: self.slots,
            sep_pos,
            loss_mask: self.mask,
        }
    }
}

impl<'a> Packer<'a> {
    pub fn new(vocab: &'a Vocab, d_img: usize) -> Self {
        Self {
            vocab,
            d_img,
            text_only: false,
        }
    }

    pub fn text_only(mut self, on: bool) -> Self {
        self.text_only = on;
        self
    }

    fn features(&self, item: &Item) -> Result<Vec<f64>> {
        if self.text_only {
            return Ok(vec![1.0 / (self.d_img as f64).sqrt(); self.d_img]);
        }
        if item.image_features.len() != self.d_img {
            return Err(Error::Invalid(format!(
                "item `{}` has {} image features, expected {}",
                item.item_id,
                item.image_features.len(),
                self.d_img
            )));
        }
        Ok(item.image_features.clone())
    }

    fn push_text(&self, b: &mut Builder, text: &str, in_loss: bool) {
        for id in self.vocab.encode(text) {
            b.push(id, in_loss);
        }
    }

    fn push_item(&self, b: &mut Builder, item: &Item, in_loss: bool) -> Result<()> {
        let feats = self.features(item)?;
        for id in self.vocab.encode(&flatten_item(item, true)) {
            if id == IMG {
                b.slots.push(ImageSlot {
                    position: b.ids.len(),
                    features: feats.clone(),
                });
            }
            b.push(id, in_loss);
        }
        Ok(())
    }

    fn history_builder(&self, history: &[Item]) -> Result<Builder> {
        if history.is_empty() {
            return Err(Error::Invalid("history must contain at least one item".into()));
        }
        let mut b = Builder::new();
        self.push_text(&mut b, USER_PREFIX, false);
        for (i, item) in history.iter().enumerate() {
            let cue = if i == 0 { FIRST_ITEM_CUE } else { NEXT_ITEM_CUE };
            self.push_text(&mut b, cue, false);
            self.push_item(&mut b, item, false)?;
        }
        self.push_text(&mut b, NEXT_ITEM_CUE, false);
        b.push(SEP, false);
        Ok(b)
    }

    /// Full (history + target) pack and the target-only pack.
    pub fn pack_prompt(&self, history: &[Item], target: &Item) -> Result<(PackedSequence, PackedSequence)> {
        let mut b = self.history_builder(history)?;
        let sep = b.ids.len() - 1;
        self.push_item(&mut b, target, true)?;
        b.push(EOS, true);
        Ok((b.finish(Some(sep)), self.pack_target(target)?))
    }

    /// Generation prompt: the history pack ending in SEP.
    pub fn pack_history(&self, history: &[Item]) -> Result<PackedSequence> {
        let b = self.history_builder(history)?;
        let sep = b.ids.len() - 1;
        Ok(b.finish(Some(sep)))
    }

    pub fn pack_target(&self, target: &Item) -> Result<PackedSequence> {
        let mut b = Builder::new();
        self.push_item(&mut b, target, false)?;
        b.push(EOS, false);
        Ok(b.finish(None))
    }
}

/// Every prompt string the packer can emit, for vocabulary building.
pub fn template_texts() -> [&'static str; 3] {
    [USER_PREFIX, FIRST_ITEM_CUE, NEXT_ITEM_CUE]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, title: &str) -> Item {
        Item {
            item_id: id.into(),
            title: title.into(),
            category: "Subscription Boxes".into(),
            brand: "Funko".into(),
            price: "Unknown".into(),
            image_ref: format!("{id}.jpg"),
            image_features: vec![0.5; 4],
        }
    }

    fn vocab(items: &[Item]) -> Vocab {
        let mut texts: Vec<String> = template_texts().iter().map(|s| s.to_string()).collect();
        texts.extend(items.iter().map(|i| flatten_item(i, true)));
        Vocab::build(texts.iter().map(String::as_str))
    }

    #[test]
    fn two_item_history_layout() {
        let items = [item("a", "Groot Box"), item("b", "Corps Box"), item("c", "WWE Shirt")];
        let v = vocab(&items);
        let p = Packer::new(&v, 4);
        let (full, tgt) = p.pack_prompt(&items[..2], &items[2]).unwrap();
        full.validate().unwrap();
        tgt.validate().unwrap();
        assert_eq!(full.image_slots.len(), 3);
        assert_eq!(full.token_ids.iter().filter(|&&t| t == SEP).count(), 1);
        let sep = full.sep_pos.unwrap();
        assert_eq!(full.m(), Some(sep - 1));
        assert!(full.loss_mask[..=sep].iter().all(|m| !m));

        let target_text = v.encode(&flatten_item(&items[2], true));
        let text_tokens = target_text.iter().filter(|&&t| t != IMG).count();
        assert_eq!(full.loss_mask.iter().filter(|&&m| m).count(), text_tokens + 1);
        assert_eq!(&full.token_ids[sep + 1..full.len() - 1], &target_text[..]);
        assert_eq!(*full.token_ids.last().unwrap(), EOS);

        assert_eq!(tgt.sep_pos, None);
        assert_eq!(tgt.token_ids[0], BOS);
        assert_eq!(tgt.image_slots.len(), 1);
        assert_eq!(&tgt.token_ids[1..tgt.len() - 1], &target_text[..]);
    }

    #[test]
    fn prompt_text_matches_template() {
        let items = [item("a", "A"), item("b", "B"), item("c", "C")];
        let v = vocab(&items);
        let full = Packer::new(&v, 4).pack_prompt(&items[..2], &items[2]).unwrap().0;
        let expected = format!(
            "{USER_PREFIX} {FIRST_ITEM_CUE} {} {NEXT_ITEM_CUE} {} {NEXT_ITEM_CUE}",
            flatten_item(&items[0], true),
            flatten_item(&items[1], true)
        );
        let sep = full.sep_pos.unwrap();
        assert_eq!(&full.token_ids[1..sep], &v.encode(&expected)[..]);
    }

    #[test]
    fn history_pack_ends_with_sep() {
        let items = [item("a", "A"), item("b", "B")];
        let v = vocab(&items);
        let h = Packer::new(&v, 4).pack_history(&items[..1]).unwrap();
        h.validate().unwrap();
        assert_eq!(*h.token_ids.last().unwrap(), SEP);
        assert!(h.loss_mask.iter().all(|m| !m));
    }

    #[test]
    fn empty_history_rejected() {
        let items = [item("a", "A")];
        let v = vocab(&items);
        assert!(Packer::new(&v, 4).pack_prompt(&[], &items[0]).is_err());
    }

    #[test]
    fn text_only_uses_constant_features() {
        let mut items = [item("a", "A"), item("b", "B")];
        items[1].image_features = vec![1.0, 0.0, 0.0, 0.0];
        let v = vocab(&items);
        let (full, _) = Packer::new(&v, 4)
            .text_only(true)
            .pack_prompt(&items[..1], &items[1])
            .unwrap();
        assert!(full.image_slots.iter().all(|s| s.features == vec![0.5; 4]));
    }

    #[test]
    fn unfeaturized_item_rejected() {
        let mut items = [item("a", "A"), item("b", "B")];
        items[0].image_features.clear();
        let v = vocab(&items);
        assert!(Packer::new(&v, 4).pack_prompt(&items[..1], &items[1]).is_err());
    }
}
