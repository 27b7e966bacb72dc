//! Sampled next-item text candidates with temperature and repetition penalty.

use std::collections::HashSet;

use ndarray::Array1;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Item;
use crate::encoder::decode::Decoder;
use crate::encoder::pack::{ImageSlot, PackedSequence, Packer};
use crate::encoder::vocab::{BOS, EOS, IMG, PAD, SEP, UNK};
use crate::encoder::{forward_eval, ModelParams, Vocab};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Sum of sampled-token log-probabilities under the penalized,
    /// temperature-scaled distribution.
    pub logprob: f64,
    pub token_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_return: usize,
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Rank and report by mean per-token log-probability instead of the sum.
    pub length_normalized: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_return: 32,
            temperature: 0.5,
            repetition_penalty: 1.2,
            max_new_tokens: 64,
            seed: 0,
            length_normalized: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::Config("repetition_penalty must be >= 1".into()));
        }
        if self.n_return == 0 {
            return Err(Error::Config("n_return must be >= 1".into()));
        }
        Ok(())
    }
}

/// Divide positive logits and multiply non-positive logits of already
/// generated ids by `penalty`.
pub fn apply_repetition_penalty(logits: &mut [f64], generated: &HashSet<u32>, penalty: f64) {
    for &id in generated {
        if let Some(l) = logits.get_mut(id as usize) {
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// Tokens that are never sampled: they only structure prompts.
pub const NEVER_SAMPLED: [u32; 4] = [PAD, BOS, UNK, SEP];

/// Log-softmax of penalized logits divided by the temperature, with the
/// structural tokens removed.
pub fn step_log_probs(logits: &Array1<f64>, generated: &HashSet<u32>, cfg: &GenConfig) -> Vec<f64> {
    let mut l = logits.to_vec();
    apply_repetition_penalty(&mut l, generated, cfg.repetition_penalty);
    l.iter_mut().for_each(|x| *x /= cfg.temperature);
    for t in NEVER_SAMPLED {
        if let Some(x) = l.get_mut(t as usize) {
            *x = f64::NEG_INFINITY;
        }
    }
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    l.iter().map(|x| x - lse).collect()
}

fn draw(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn check_prompt(prompt: &PackedSequence) -> Result<()> {
    if prompt.token_ids.last() != Some(&SEP) {
        return Err(Error::Invalid("generation prompt must end with the separator".into()));
    }
    Ok(())
}

/// Draw `n_return` candidates after `prompt`, sorted by score descending.
/// Each candidate uses its own stream derived from `(seed, index)`.
pub fn sample_candidates(
    params: &ModelParams,
    vocab: &Vocab,
    prompt: &PackedSequence,
    cfg: &GenConfig,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    check_prompt(prompt)?;
    let mut prefix = Decoder::new(params);
    let first_logits = prefix.prefill(prompt)?;
    let blank_image = vec![0.0; params.config.d_img];
    let max_len = params.config.max_len;

    let mut cands: Vec<(usize, Candidate)> = (0..cfg.n_return)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::seeded(rng::derive(cfg.seed, &[c as u64]));
            let mut dec = prefix.clone();
            let mut logits = first_logits.clone();
            let mut seen = HashSet::new();
            let mut ids = Vec::new();
            let mut logprob = 0.0;
            for _ in 0..cfg.max_new_tokens {
                let lp = step_log_probs(&logits, &seen, cfg);
                let tok = draw(&lp, r.random::<f64>()) as u32;
                logprob += lp[tok as usize];
                if tok == EOS {
                    break;
                }
                ids.push(tok);
                seen.insert(tok);
                if dec.len() >= max_len {
                    break;
                }
                let img = (tok == IMG).then_some(blank_image.as_slice());
                let h = dec.feed(tok, img)?;
                logits = dec.logits(&h);
            }
            if cfg.length_normalized {
                logprob /= (ids.len() + 1) as f64;
            }
            let text = vocab.decode(&ids);
            Ok((
                c,
                Candidate {
                    text,
                    logprob,
                    token_ids: ids,
                },
            ))
        })
        .collect::<Result<_>>()?;
    cands.sort_by(|a, b| b.1.logprob.total_cmp(&a.1.logprob).then(a.0.cmp(&b.0)));
    Ok(cands.into_iter().map(|(_, c)| c).collect())
}

/// Re-score a generated continuation with a full forward pass. `ended` says
/// whether the sampled sequence terminated with EOS.
pub fn teacher_forced_logprob(
    params: &ModelParams,
    prompt: &PackedSequence,
    continuation: &[u32],
    ended: bool,
    cfg: &GenConfig,
) -> Result<f64> {
    check_prompt(prompt)?;
    let mut seq = prompt.clone();
    for &t in continuation {
        if t == IMG {
            seq.image_slots.push(ImageSlot {
                position: seq.token_ids.len(),
                features: vec![0.0; params.config.d_img],
            });
        }
        seq.token_ids.push(t);
        seq.loss_mask.push(false);
    }
    let (_, logits) = forward_eval(params, &seq)?;
    let start = prompt.len() - 1;
    let mut targets: Vec<u32> = continuation.to_vec();
    if ended {
        targets.push(EOS);
    }
    let mut seen = HashSet::new();
    let mut total = 0.0;
    for (k, &t) in targets.iter().enumerate() {
        let row = logits.row(start + k).to_owned();
        total += step_log_probs(&row, &seen, cfg)[t as usize];
        seen.insert(t);
    }
    Ok(total)
}

/// Anything that proposes next-item texts for a purchase history.
pub trait CandidateGenerator: Sync {
    fn generate(&self, history: &[Item], seed: u64) -> Result<Vec<Candidate>>;
}

/// Sampling from a trained model.
pub struct ModelGenerator<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocab,
    pub cfg: GenConfig,
    pub text_only: bool,
}

impl CandidateGenerator for ModelGenerator<'_> {
    fn generate(&self, history: &[Item], seed: u64) -> Result<Vec<Candidate>> {
        let packer = Packer::new(self.vocab, self.params.config.d_img).text_only(self.text_only);
        let prompt = packer.pack_history(history)?;
        let cfg = GenConfig {
            seed,
            ..self.cfg.clone()
        };
        sample_candidates(self.params, self.vocab, &prompt, &cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_rule() {
        let gen: HashSet<u32> = [0, 1].into_iter().collect();
        let mut l = vec![2.0, -1.0, 0.5];
        apply_repetition_penalty(&mut l, &gen, 1.2);
        assert!((l[0] - 2.0 / 1.2).abs() < 1e-12);
        assert!((l[0] - 1.6667).abs() < 1e-4);
        assert!((l[1] + 1.2).abs() < 1e-12);
        assert_eq!(l[2], 0.5);

        let mut l = vec![2.0, -1.0, 0.5];
        apply_repetition_penalty(&mut l, &gen, 1.0);
        assert_eq!(l, vec![2.0, -1.0, 0.5]);
    }

    #[test]
    fn rigged_two_step_logprob() {
        // Three real tokens, forced path 1 then 2.
        let cfg = GenConfig {
            temperature: 0.5,
            repetition_penalty: 1.2,
            ..GenConfig::default()
        };
        // They sit at ids 6..9; masked specials get arbitrary logits, EOS and
        // IMG get negligible mass.
        let pad = |v: [f64; 3]| Array1::from_iter([9.0, -3.0, -1e3, 4.0, 7.0, -1e3].into_iter().chain(v));
        let shifted = |lp: Vec<f64>| [lp[6], lp[7], lp[8]];
        let lp = step_log_probs(&pad([0.0, 1.0, 0.5]), &HashSet::new(), &cfg);
        assert!(lp[..6].iter().enumerate().all(|(i, &x)| x.is_finite() == !NEVER_SAMPLED.contains(&(i as u32))));
        let lp1 = shifted(lp);
        let seen: HashSet<u32> = [7].into_iter().collect();
        let lp2 = shifted(step_log_probs(&pad([0.2, 1.0, 0.4]), &seen, &cfg));
        // step 1: logits/T = (0, 2, 1); step 2: token 1 penalized to 1/1.2, then /T
        let p1 = 2f64.exp() / (1.0 + 2f64.exp() + 1f64.exp());
        let z2: [f64; 3] = [0.4, 2.0 / 1.2, 0.8];
        let p2 = z2[2].exp() / z2.iter().map(|z| z.exp()).sum::<f64>();
        assert!((lp1[1] - p1.ln()).abs() < 1e-12);
        assert!((lp2[2] - p2.ln()).abs() < 1e-12);
        assert!((lp1[1] + lp2[2] - (p1 * p2).ln()).abs() < 1e-12);
    }

    #[test]
    fn draw_respects_cumulative_mass() {
        let lp: Vec<f64> = [0.2f64, 0.5, 0.3].iter().map(|p| p.ln()).collect();
        assert_eq!(draw(&lp, 0.1), 0);
        assert_eq!(draw(&lp, 0.6), 1);
        assert_eq!(draw(&lp, 0.95), 2);
        let lp = vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        assert_eq!(draw(&lp, 0.999_999), 1);
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(GenConfig { repetition_penalty: 0.9, ..Default::default() }.validate().is_err());
        assert!(GenConfig { n_return: 0, ..Default::default() }.validate().is_err());
        assert!(GenConfig::default().validate().is_ok());
    }

    #[test]
    fn sampled_logprob_matches_teacher_forcing() {
        use crate::encoder::{ModelConfig, TrainMode};
        let items: Vec<Item> = ["red kite", "blue ball", "kite string"]
            .iter()
            .enumerate()
            .map(|(i, t)| Item {
                item_id: format!("i{i}"),
                title: t.to_string(),
                category: "Toys".into(),
                brand: "Acme".into(),
                price: "3.5".into(),
                image_ref: String::new(),
                image_features: vec![i as f64; 4],
            })
            .collect();
        let vocab = crate::pipeline::build_vocab(&items);
        let mc = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_len: 256,
            d_img: 4,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&mc, 3, TrainMode::Adapters).unwrap();
        let prompt = Packer::new(&vocab, 4).pack_history(&items[..2]).unwrap();
        let cfg = GenConfig {
            n_return: 6,
            max_new_tokens: 12,
            seed: 9,
            ..GenConfig::default()
        };
        let cands = sample_candidates(&params, &vocab, &prompt, &cfg).unwrap();
        assert_eq!(cands.len(), 6);
        assert!(cands.windows(2).all(|w| w[0].logprob >= w[1].logprob));
        for c in &cands {
            assert!(c.token_ids.iter().all(|t| !NEVER_SAMPLED.contains(t)));
            let ended = c.token_ids.len() < cfg.max_new_tokens;
            let tf = teacher_forced_logprob(&params, &prompt, &c.token_ids, ended, &cfg).unwrap();
            assert!((tf - c.logprob).abs() < 1e-6, "{tf} vs {}", c.logprob);
        }
        assert_eq!(cands, sample_candidates(&params, &vocab, &prompt, &cfg).unwrap());
    }
}
