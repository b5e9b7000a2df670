use crate::error::{Result, SsipError};
use crate::nn::{Gradients, Matrix, ParamStore};

use super::TrainConfig;

/// Huber loss of `pred - target`.
pub fn huber_loss(pred: f64, target: f64, delta: f64) -> f64 {
    let e = (pred - target).abs();
    if e <= delta {
        0.5 * e * e
    } else {
        delta * (e - 0.5 * delta)
    }
}

/// Derivative of [`huber_loss`] with respect to the error.
pub fn huber_grad(error: f64, delta: f64) -> f64 {
    error.clamp(-delta, delta)
}

/// Per-epoch learning rate: linear warmup from `start_factor · lr`, then
/// cosine annealing towards zero.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(SsipError::Range(format!(
            "epoch {epoch} outside a {}-epoch schedule",
            cfg.epochs
        )));
    }
    let lr = cfg.learning_rate;
    let warmup = cfg.warmup_epochs;
    if epoch < warmup {
        let f = cfg.warmup_start_factor;
        return Ok(lr * (f + (1.0 - f) * epoch as f64 / warmup as f64));
    }
    let span = (cfg.epochs - warmup) as f64;
    let progress = (epoch - warmup) as f64 / span;
    Ok((lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.values().iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.all())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}
