use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// Top-bottom mirror.
    Vertical,
    /// Left-right mirror.
    Horizontal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_prob: f32,
    pub flip_axis: FlipAxis,
    pub max_rotation_deg: f32,
    /// Maximum relative change of brightness and of contrast.
    pub lighting_jitter: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { flip_prob: 0.5, flip_axis: FlipAxis::Vertical, max_rotation_deg: 15.0, lighting_jitter: 0.1 }
    }
}

/// One concrete draw from a policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f32,
    pub brightness: f32,
    pub contrast: f32,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self { flip: false, angle_deg: 0.0, brightness: 1.0, contrast: 1.0 };
}

impl AugmentPolicy {
    pub fn none() -> Self {
        Self { flip_prob: 0.0, flip_axis: FlipAxis::Vertical, max_rotation_deg: 0.0, lighting_jitter: 0.0 }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(DataError::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite()) {
            return Err(DataError::Config(format!("max rotation {} must be non-negative", self.max_rotation_deg)));
        }
        if !(0.0..1.0).contains(&self.lighting_jitter) {
            return Err(DataError::Config(format!("lighting jitter {} outside [0, 1)", self.lighting_jitter)));
        }
        Ok(())
    }

    /// Always consumes the same number of draws, whatever the policy.
    pub fn sample(&self, rng: &mut impl Rng) -> AugmentParams {
        let flip = rng.random::<f32>() < self.flip_prob;
        let angle_deg = (rng.random::<f32>() * 2.0 - 1.0) * self.max_rotation_deg;
        let brightness = 1.0 + (rng.random::<f32>() * 2.0 - 1.0) * self.lighting_jitter;
        let contrast = 1.0 + (rng.random::<f32>() * 2.0 - 1.0) * self.lighting_jitter;
        AugmentParams { flip, angle_deg, brightness, contrast }
    }

    pub fn augment(&self, img: &Tensor, rng: &mut impl Rng) -> Result<Tensor, DataError> {
        let params = self.sample(rng);
        apply(img, self.flip_axis, &params)
    }
}

/// Applies flip, then rotation about the image center (bilinear, edges
/// replicated), then contrast about the image mean and brightness scaling,
/// clamped to `[0, 1]`. Steps whose parameter is neutral are skipped.
pub fn apply(img: &Tensor, axis: FlipAxis, p: &AugmentParams) -> Result<Tensor, DataError> {
    let [c, h, w] = match *img.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(DataError::Config(format!("expected a CxHxW image, got shape {s:?}"))),
    };
    let mut data = img.data().to_vec();
    if p.flip {
        flip(&mut data, c, h, w, axis);
    }
    if p.angle_deg != 0.0 {
        data = rotate(&data, c, h, w, p.angle_deg);
    }
    if p.brightness != 1.0 || p.contrast != 1.0 {
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() as f32 / data.len() as f32;
        for v in &mut data {
            *v = (((*v - mean) * p.contrast + mean) * p.brightness).clamp(0.0, 1.0);
        }
    }
    Ok(Tensor::new(&[c, h, w], data).expect("shape preserved"))
}

fn flip(data: &mut [f32], c: usize, h: usize, w: usize, axis: FlipAxis) {
    for plane in data.chunks_mut(h * w).take(c) {
        match axis {
            FlipAxis::Vertical => {
                for y in 0..h / 2 {
                    let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                    top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
                }
            }
            FlipAxis::Horizontal => {
                for row in plane.chunks_mut(w) {
                    row.reverse();
                }
            }
        }
    }
}

fn rotate(data: &[f32], c: usize, h: usize, w: usize, angle_deg: f32) -> Vec<f32> {
    let (sin, cos) = (angle_deg as f64).to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, (w - 1) as f64);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let p = &data[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[ch * h * w + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}
