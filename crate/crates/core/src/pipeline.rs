//! Steps shared by the command line and the synthetic experiment.

use rayon::prelude::*;

use crate::corpus::{flatten_item, InteractionSequence, Item};
use crate::encoder::pack::template_texts;
use crate::encoder::{ModelConfig, ModelParams, Packer, Vocab};
use crate::error::{Error, Result};
use crate::objective::train::Pair;
use crate::objective::{self, MixConfig, StepStats, TrainConfig};
use crate::rng;

/// Vocabulary over the prompt templates and every flattened item.
pub fn build_vocab(items: &[Item]) -> Vocab {
    let texts: Vec<String> = items.iter().map(|i| flatten_item(i, true)).collect();
    Vocab::build(template_texts().into_iter().chain(texts.iter().map(String::as_str)))
}

/// Pack each sequence as (history → target) training pairs.
pub fn training_pairs(packer: &Packer, seqs: &[InteractionSequence]) -> Result<Vec<Pair>> {
    seqs.par_iter()
        .map(|s| {
            if s.n() < 2 {
                return Err(Error::Invalid(format!("sequence of `{}` has no history", s.user_id)));
            }
            packer.pack_prompt(s.history(), s.target())
        })
        .collect()
}

/// Whether a user belongs to the held-out split; depends only on the seed
/// and the user id.
pub fn is_test_user(user_id: &str, test_fraction: f64, seed: u64) -> bool {
    let h = rng::derive_str(seed, user_id);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < test_fraction
}

/// Initialize a model sized to `vocab` and train it on `seqs`.
#[allow(clippy::too_many_arguments)]
pub fn fit<F>(
    model: &ModelConfig,
    vocab: &Vocab,
    seqs: &[InteractionSequence],
    text_only: bool,
    mix: &MixConfig,
    tcfg: &TrainConfig,
    init_seed: u64,
    on_step: F,
) -> Result<(ModelParams, Vec<StepStats>)>
where
    F: FnMut(&StepStats, &ModelParams) -> Result<()>,
{
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        ..model.clone()
    };
    let mut params = ModelParams::init(&cfg, init_seed, tcfg.mode)?;
    let packer = Packer::new(vocab, cfg.d_img).text_only(text_only);
    let pairs = training_pairs(&packer, seqs)?;
    let stats = objective::train(&mut params, &pairs, mix, tcfg, on_step)?;
    Ok((params, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_stable_and_roughly_sized() {
        let n = (0..2000).filter(|i| is_test_user(&format!("u{i}"), 0.2, 9)).count();
        assert!((300..500).contains(&n), "{n}");
        assert_eq!(is_test_user("u1", 0.2, 9), is_test_user("u1", 0.2, 9));
        assert!(!is_test_user("u1", 0.0, 9));
    }
}
