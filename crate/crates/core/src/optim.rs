//! Adam / AdamW over a flat parameter vector.

use std::ops::Range;

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); zero gives plain Adam.
    pub weight_decay: f64,
    /// Parameter ranges that receive weight decay.
    pub decay_ranges: Vec<Range<usize>>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_ranges: Vec::new(),
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64, ranges: Vec<Range<usize>>) -> Self {
        self.weight_decay = wd;
        self.decay_ranges = ranges;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        if self.weight_decay > 0.0 {
            let f = lr * self.weight_decay;
            for r in &self.decay_ranges {
                for p in &mut params[r.clone()] {
                    *p -= f * *p;
                }
            }
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 to 0 at step `total`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64) -> f64 {
    let total = total.max(1);
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * t).cos())
}
