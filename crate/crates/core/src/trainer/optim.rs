use super::config::{OptimizerKind, TrainConfig};
use crate::model::ModelParams;

/// Cosine decay from `base` at step 0 to 0 at `total - 1`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD or Adam with decoupled weight decay. The scalars `k` and `b` are not decayed.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Option<ModelParams>,
    v: Option<ModelParams>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            kind: config.optimizer,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            m: None,
            v: None,
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        let decay: Vec<bool> = params.arrays().iter().map(|(s, _)| s.name != "k" && s.name != "b").collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, (p, (_, g))) in params.arrays_mut().into_iter().zip(grads.arrays()).enumerate() {
                    let wd = if decay[i] { self.weight_decay } else { 0.0 };
                    for (x, gx) in p.iter_mut().zip(g) {
                        *x -= lr * (gx + wd * *x);
                    }
                }
            }
            OptimizerKind::AdamW => {
                self.t += 1;
                let m = self.m.get_or_insert_with(|| grads.zeros_like());
                let v = self.v.get_or_insert_with(|| grads.zeros_like());
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let arrays = params.arrays_mut().into_iter().zip(grads.arrays()).zip(m.arrays_mut()).zip(v.arrays_mut());
                for (i, (((p, (_, g)), ma), va)) in arrays.enumerate() {
                    let wd = if decay[i] { self.weight_decay } else { 0.0 };
                    for (((x, gx), mx), vx) in p.iter_mut().zip(g).zip(ma.iter_mut()).zip(va.iter_mut()) {
                        *mx = b1 * *mx + (1.0 - b1) * gx;
                        *vx = b2 * *vx + (1.0 - b2) * gx * gx;
                        let step = (*mx / c1) / ((*vx / c2).sqrt() + eps);
                        *x -= lr * (step + wd * *x);
                    }
                }
            }
        }
    }
}
