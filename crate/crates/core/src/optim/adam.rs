use serde::{Deserialize, Serialize};

use super::{LrAssignment, OptimError};
use crate::nn::ParamStore;

pub trait Optimizer {
    /// Updates every trainable parameter from its gradient at its group's
    /// rate. Frozen parameters and buffers are not touched.
    fn step(&mut self, params: &mut ParamStore, lrs: &LrAssignment) -> Result<(), OptimError>;
}

fn check_groups(params: &ParamStore, lrs: &LrAssignment) -> Result<(), OptimError> {
    let needed = params.iter().filter(|p| p.trainable()).map(|p| p.group + 1).max().unwrap_or(0);
    if lrs.len() < needed {
        return Err(OptimError::GroupMismatch { expected: needed, got: lrs.len() });
    }
    Ok(())
}

/// Plain gradient descent, `θ ← θ − η·g`.
#[derive(Debug, Clone, Default)]
pub struct GradientDescent;

impl Optimizer for GradientDescent {
    fn step(&mut self, params: &mut ParamStore, lrs: &LrAssignment) -> Result<(), OptimError> {
        check_groups(params, lrs)?;
        for p in params.iter_mut().filter(|p| p.trainable()) {
            let lr = lrs.rates[p.group] as f32;
            let grad = p.value.take_grad().ok_or_else(|| OptimError::MissingGrad { name: p.name.clone() })?;
            for (w, g) in p.value.data_mut().iter_mut().zip(&grad) {
                *w -= lr * g;
            }
            p.value.set_grad(grad).expect("same shape");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam without weight decay. Moment buffers are indexed by
/// parameter id and created on first use.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moments per parameter id; empty for parameters never
    /// updated.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn from_state(config: AdamConfig, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<Self, OptimError> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(OptimError::Config("first and second moments differ in layout".into()));
        }
        Ok(Self { config, t, m, v })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, lrs: &LrAssignment) -> Result<(), OptimError> {
        check_groups(params, lrs)?;
        if let Some(p) = params.iter().find(|p| p.trainable() && p.value.grad().is_none()) {
            return Err(OptimError::MissingGrad { name: p.name.clone() });
        }
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        for (id, p) in params.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let lr = lrs.rates[p.group];
            let step_size = (lr / bc1) as f32;
            let inv_bc2 = (1.0 / bc2) as f32;
            let n = p.value.numel();
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            if m.len() != n {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            let grad = p.value.take_grad().expect("checked above");
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps as f32);
            }
            p.value.set_grad(grad).expect("same shape");
        }
        Ok(())
    }
}
