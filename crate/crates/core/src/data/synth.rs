use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::encode_ppm;
use super::manifest::{DatasetManifest, Record};
use super::{DataError, Split, CLASS_NAMES};
use crate::rng::{derived_rng, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train: [usize; 4],
    pub test: [usize; 4],
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { train: [200, 200, 200, 20], test: [60, 60, 60, 10], image_size: 64, seed: 0 }
    }
}

/// Writes `images/<split>/<class>_<i>.ppm` and `manifest.csv` under `dir`.
/// Every image is a function of the seed, split, class and index alone.
pub fn gen_synthetic(dir: &Path, cfg: &SynthConfig) -> Result<DatasetManifest, DataError> {
    if cfg.image_size < 16 {
        return Err(DataError::Config(format!("image size must be at least 16, got {}", cfg.image_size)));
    }
    let mut records = Vec::new();
    for (split, counts) in [(Split::Train, cfg.train), (Split::Test, cfg.test)] {
        let sub = dir.join("images").join(split.as_str());
        std::fs::create_dir_all(&sub).map_err(|e| DataError::io(&sub, e))?;
        for (label, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let mut rng = derived_rng(cfg.seed, &[stream::SYNTH, split as u64, label as u64, i as u64]);
                let img = render(label, cfg.image_size, &mut rng);
                let rel = format!("images/{}/{}_{i:04}.ppm", split.as_str(), CLASS_NAMES[label].to_lowercase());
                let path = dir.join(&rel);
                std::fs::write(&path, encode_ppm(&img)?).map_err(|e| DataError::io(&path, e))?;
                records.push(Record { path: rel, label, split });
            }
        }
    }
    let manifest = DatasetManifest::new(dir, records);
    manifest.write_csv(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Gray radiograph-like field: a smooth background with two brighter lung
/// regions, sensor noise, and a class-specific pattern at a random place.
fn render(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = size as f32;
    let noise = Normal::new(0.0f32, 0.04).expect("valid");
    let tilt: f32 = rng.random_range(-0.08..0.08);
    let base: f32 = rng.random_range(0.25..0.4);
    let mut img = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 / s, y as f32 / s);
            let lung = [0.3f32, 0.7]
                .iter()
                .map(|&cx| (-(((u - cx) / 0.16).powi(2) + ((v - 0.5) / 0.3).powi(2))).exp())
                .sum::<f32>();
            img[y * size + x] = base + tilt * (v - 0.5) + 0.15 * lung;
        }
    }
    match label {
        1 => {
            for _ in 0..rng.random_range(1..=2) {
                let (cx, cy) = (rng.random_range(0.2..0.8) * s, rng.random_range(0.25..0.75) * s);
                let r = rng.random_range(0.1..0.16) * s;
                let amp = rng.random_range(0.2..0.3);
                splat(&mut img, size, |x, y| amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / (r * r)).exp());
            }
        }
        2 => {
            let theta: f32 = rng.random_range(0.0..std::f32::consts::PI);
            let period = rng.random_range(0.12..0.16) * s;
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let amp = rng.random_range(0.12..0.16);
            let (ct, st) = (theta.cos(), theta.sin());
            splat(&mut img, size, |x, y| {
                amp * ((x * ct + y * st) * std::f32::consts::TAU / period + phase).sin()
            });
        }
        3 => {
            for _ in 0..rng.random_range(3..=5) {
                let (cx, cy) = (rng.random_range(0.12..0.88) * s, rng.random_range(0.15..0.85) * s);
                let r = rng.random_range(0.06..0.09) * s;
                let width = 0.25 * r;
                let amp = rng.random_range(0.18..0.26);
                splat(&mut img, size, |x, y| {
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r;
                    amp * (-(d * d) / (width * width)).exp()
                });
            }
        }
        _ => {}
    }
    let gray: Vec<f32> = img.iter().map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0)).collect();
    Tensor::from_fn(&[3, size, size], |i| gray[i % (size * size)])
}

fn splat(img: &mut [f32], size: usize, f: impl Fn(f32, f32) -> f32) {
    for y in 0..size {
        for x in 0..size {
            img[y * size + x] += f(x as f32 + 0.5, y as f32 + 0.5);
        }
    }
}
