//! First-order optimizers over [`Param`] lists.

use std::f64::consts::PI;

use crate::tensor::Param;

pub fn zero_grads(params: &[Param]) {
    for p in params {
        p.zero_grad();
    }
}

/// Cosine annealing from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug)]
pub struct Sgd {
    params: Vec<Param>,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: Vec<Param>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Sgd {
            params,
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn step(&mut self, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (p, v) in self.params.iter().zip(&mut self.velocity) {
            p.update(|w, g| {
                for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                    let d = g + wd * *w;
                    *v = mu * *v + d;
                    *w -= lr * *v;
                }
            });
        }
    }
}

/// Adam with optional L2 weight decay folded into the gradient.
#[derive(Debug)]
pub struct Adam {
    params: Vec<Param>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Param>, weight_decay: f64) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            v: m.clone(),
            m,
            params,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            p.update(|w, g| {
                for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let d = g + wd * *w;
                    *m = b1 * *m + (1.0 - b1) * d;
                    *v = b2 * *v + (1.0 - b2) * d * d;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            });
        }
    }
}
