use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `lr(s) = base * 0.5 * (1 + cos(pi * s / total))`, reaching zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f32,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f32 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let s = step.min(self.total_steps) as f64 / self.total_steps as f64;
        (self.base_lr as f64 * 0.5 * (1.0 + (PI * s).cos())) as f32
    }
}

/// `param <- param - lr * grad` for matched pairs.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.check_same_shape(g)?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32) -> Self {
        Sgd { momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, lr);
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        let mut steps = Vec::with_capacity(grads.len());
        for (vel, g) in self.velocity.iter_mut().zip(grads) {
            for (v, d) in vel.iter_mut().zip(g.data()) {
                *v = self.momentum * *v + d;
            }
            steps.push(Tensor::new(g.shape(), vel.clone())?);
        }
        sgd_step(params, &steps, lr)
    }
}

/// Adam with bias correction; used where the optimizer is not part of the
/// method under study.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            p.check_same_shape(g)?;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}
