use serde::{Deserialize, Serialize};

use crate::model::Weights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    Cosine,
    Constant,
}

/// Linear warmup to `peak`, then decay to `min_ratio * peak` at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub decay: DecayKind,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        match self.decay {
            DecayKind::Constant => self.peak,
            DecayKind::Cosine => {
                let span = self.total.saturating_sub(self.warmup).max(1) as f64;
                let progress = ((step - self.warmup) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                self.peak * (self.min_ratio + (1.0 - self.min_ratio) * cos)
            }
        }
    }
}

/// Adam with decoupled weight decay. Norm gains are not decayed.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Weights<f32>,
    v: Weights<f32>,
    t: i32,
}

impl AdamW {
    pub fn new(like: &Weights<f32>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut Weights<f32>, grads: &Weights<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        let names: Vec<bool> = grads
            .tensors()
            .iter()
            .map(|(n, _)| !n.ends_with("norm"))
            .collect();
        let decay = (lr * self.weight_decay) as f32;
        for ((((w, g), m), v), decayed) in weights
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(names)
        {
            let g = g.1.data();
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                if decayed {
                    *wi -= decay * *wi;
                }
                *wi -= step * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Weights<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|(_, m)| m.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}
