use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LrAssignment, OptimError, Optimizer};
use crate::nn::{ParamRole, ParamStore};
use crate::rng::{derived_rng, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrFinderConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub n_iters: usize,
    /// EMA weight of the previous smoothed value.
    pub beta: f64,
    /// Stop once the smoothed loss exceeds this multiple of the best one.
    pub divergence_factor: f64,
    /// Points left out of the slope search at each end of the curve. The
    /// first smoothed values still follow single batches.
    #[serde(default = "default_skip_start")]
    pub skip_start: usize,
    #[serde(default = "default_skip_end")]
    pub skip_end: usize,
}

fn default_skip_start() -> usize {
    10
}

fn default_skip_end() -> usize {
    5
}

impl Default for LrFinderConfig {
    fn default() -> Self {
        Self {
            lr_min: 1e-7,
            lr_max: 10.0,
            n_iters: 100,
            beta: 0.98,
            divergence_factor: 4.0,
            skip_start: default_skip_start(),
            skip_end: default_skip_end(),
        }
    }
}

impl LrFinderConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::Config(m));
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.n_iters < 10 {
            return bad(format!("need at least 10 iterations, got {}", self.n_iters));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("smoothing beta {} outside [0, 1)", self.beta));
        }
        if self.divergence_factor <= 1.0 {
            return bad(format!("divergence factor {} must exceed 1", self.divergence_factor));
        }
        Ok(())
    }

    /// Rate for iteration `i`: exponential interpolation from `lr_min` at
    /// 0 to `lr_max` at `n_iters − 1`.
    pub fn lr_at(&self, i: usize) -> f64 {
        if i == 0 {
            return self.lr_min;
        }
        self.lr_min * (self.lr_max / self.lr_min).powf(i as f64 / (self.n_iters - 1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopReason {
    Diverged,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lr: f64,
    pub loss: f64,
    pub smoothed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrCurve {
    pub points: Vec<CurvePoint>,
    pub suggested_lr: f64,
    pub stop_reason: StopReason,
}

/// Smooths raw losses and decides when the sweep has diverged.
#[derive(Debug, Clone)]
pub struct CurveTracker {
    beta: f64,
    divergence_factor: f64,
    skip: (usize, usize),
    avg: f64,
    best: f64,
    points: Vec<CurvePoint>,
}

impl CurveTracker {
    pub fn new(cfg: &LrFinderConfig) -> Self {
        Self {
            beta: cfg.beta,
            divergence_factor: cfg.divergence_factor,
            skip: (cfg.skip_start, cfg.skip_end),
            avg: 0.0,
            best: f64::INFINITY,
            points: Vec::new(),
        }
    }

    /// Records one sample; returns true when the smoothed loss has diverged.
    pub fn push(&mut self, lr: f64, loss: f64) -> bool {
        self.avg = self.beta * self.avg + (1.0 - self.beta) * loss;
        let smoothed = self.avg / (1.0 - self.beta.powi(self.points.len() as i32 + 1));
        self.points.push(CurvePoint { lr, loss, smoothed });
        let diverged = self.points.len() > 1 && smoothed > self.divergence_factor * self.best;
        self.best = self.best.min(smoothed);
        diverged
    }

    pub fn finish(self, stop_reason: StopReason) -> LrCurve {
        let suggested_lr = suggest(&self.points, self.skip);
        LrCurve { points: self.points, suggested_lr, stop_reason }
    }
}

/// Start of the segment where the smoothed loss falls fastest against
/// `ln lr`; the rate at the lowest smoothed loss when it never falls. The
/// `(start, end)` points are ignored when enough remain.
fn suggest(points: &[CurvePoint], (start, end): (usize, usize)) -> f64 {
    let inner = if points.len() > start + end + 2 { &points[start..points.len() - end] } else { points };
    let steepest = inner
        .windows(2)
        .map(|w| (w[0].lr, (w[1].smoothed - w[0].smoothed) / (w[1].lr.ln() - w[0].lr.ln())))
        .filter(|(_, slope)| *slope < 0.0)
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match steepest {
        Some((lr, _)) => lr,
        None => points.iter().min_by(|a, b| a.smoothed.total_cmp(&b.smoothed)).map_or(f64::NAN, |p| p.lr),
    }
}

/// Something the range test can train: computes a loss and leaves
/// gradients on its parameters.
pub trait StepTarget {
    fn params_mut(&mut self) -> &mut ParamStore;
    fn n_groups(&self) -> usize;
    fn loss_and_grad(&mut self, iter: usize) -> Result<f64, OptimError>;
}

/// Sweeps exponentially growing learning rates, one optimizer step per
/// iteration, on copies of `target` and `optimizer`; the originals are not
/// touched.
pub fn lr_range_test<T, O>(target: &T, optimizer: &O, cfg: &LrFinderConfig) -> Result<LrCurve, OptimError>
where
    T: StepTarget + Clone,
    O: Optimizer + Clone,
{
    cfg.validate()?;
    let mut target = target.clone();
    let mut opt = optimizer.clone();
    let mut tracker = CurveTracker::new(cfg);
    let n_groups = target.n_groups();
    for i in 0..cfg.n_iters {
        let lr = cfg.lr_at(i);
        let loss = target.loss_and_grad(i)?;
        if !loss.is_finite() {
            if i == 0 {
                return Err(OptimError::NonFiniteLoss { iter: 0 });
            }
            log::info!("range test loss became non-finite at lr {lr:.3e}");
            return Ok(tracker.finish(StopReason::Diverged));
        }
        if tracker.push(lr, loss) {
            return Ok(tracker.finish(StopReason::Diverged));
        }
        opt.step(target.params_mut(), &LrAssignment::uniform(lr, n_groups))?;
    }
    Ok(tracker.finish(StopReason::Exhausted))
}

/// `L(θ) = ½·λ·(θ − x)²` with a fresh `x ~ N(0, σ²)` per iteration. Gradient
/// descent on it is stable exactly for `η < 2/λ`; the noise keeps the best
/// loss away from zero so divergence is measured against a meaningful floor.
#[derive(Debug, Clone)]
pub struct QuadraticTarget {
    params: ParamStore,
    curvature: f64,
    noise: f64,
    seed: u64,
}

impl QuadraticTarget {
    pub fn new(theta: f32, curvature: f64, noise: f64, seed: u64) -> Self {
        let mut params = ParamStore::new();
        params.push("theta", Tensor::new(&[1], vec![theta]).expect("scalar"), ParamRole::Weight);
        Self { params, curvature, noise, seed }
    }

    /// θ₀ = 1, λ = 1, σ = 0.05.
    pub fn standard(seed: u64) -> Self {
        Self::new(1.0, 1.0, 0.05, seed)
    }

    pub fn theta(&self) -> f32 {
        self.params.get(0).value.data()[0]
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

impl StepTarget for QuadraticTarget {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn n_groups(&self) -> usize {
        1
    }

    fn loss_and_grad(&mut self, iter: usize) -> Result<f64, OptimError> {
        let x = if self.noise > 0.0 {
            let dist = Normal::new(0.0, self.noise).map_err(|e| OptimError::Config(e.to_string()))?;
            dist.sample(&mut derived_rng(self.seed, &[stream::LR_FINDER, iter as u64]))
        } else {
            0.0
        };
        let d = self.theta() as f64 - x;
        self.params.get_mut(0).value.set_grad(vec![(self.curvature * d) as f32]).expect("scalar");
        Ok(0.5 * self.curvature * d * d)
    }
}
