use ndarray::Array2;

use super::TrainConfig;
use crate::encoder::ModelParams;

/// AdamW with decoupled weight decay over the trainable tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
    pub steps: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.tensors.len();
        Self {
            m: vec![None; n],
            v: vec![None; n],
            steps: 0,
        }
    }

    /// `grads[i]` must be `Some` exactly for trainable tensors.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Array2<f64>>], cfg: &TrainConfig) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.learning_rate;
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let Some(g) = (if p.trainable { grads[i].as_ref() } else { None }) else {
                continue;
            };
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps) + cfg.weight_decay * *w;
                    *w -= lr * update;
                });
        }
    }
}
