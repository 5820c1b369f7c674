use std::collections::HashMap;

use rand::seq::SliceRandom;

use super::augment::AugmentPolicy;
use super::image::{decode_image, normalize, resize_bilinear, NormalizationStats};
use super::manifest::DatasetManifest;
use super::{DataError, Split};
use crate::rng::{derived_rng, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Batch {
    /// `N×3×H×W`, normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Manifest record indices, in batch order.
    pub records: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub size: usize,
    pub batch_size: usize,
    /// Seeds both the permutation and per-sample augmentation of the train
    /// split. Ignored for the test split, which is always ordered and
    /// never augmented.
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub stats: NormalizationStats,
}

/// A manifest plus a cache of decoded source images.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    cache: HashMap<usize, Tensor>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest) -> Self {
        Self { manifest, cache: HashMap::new() }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self, split: Split) -> usize {
        self.manifest.split(split).count()
    }

    /// Decoded source image of record `idx`.
    pub fn image(&mut self, idx: usize) -> Result<&Tensor, DataError> {
        if !self.cache.contains_key(&idx) {
            let path = self.manifest.resolve(&self.manifest.records[idx]);
            let bytes = std::fs::read(&path).map_err(|e| DataError::Record { path: path.clone(), msg: e.to_string() })?;
            let img = decode_image(&bytes).map_err(|e| DataError::Record { path, msg: e.to_string() })?;
            self.cache.insert(idx, img);
        }
        Ok(&self.cache[&idx])
    }

    /// Record indices of `split` in iteration order.
    pub fn order(&self, split: Split, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.manifest.records.len())
            .filter(|&i| self.manifest.records[i].split == split)
            .collect();
        if split == Split::Train {
            idx.shuffle(&mut derived_rng(seed, &[stream::SHUFFLE]));
        }
        idx
    }

    /// One pass over `split`; each record appears exactly once and the last
    /// batch may be short.
    pub fn batches(&mut self, split: Split, opts: &BatchOptions) -> Result<Batches<'_>, DataError> {
        if opts.batch_size == 0 || opts.size == 0 {
            return Err(DataError::Config("batch size and image size must be positive".into()));
        }
        opts.augment.validate()?;
        opts.stats.validate()?;
        let order = self.order(split, opts.seed);
        if order.is_empty() {
            return Err(DataError::Config(format!("{} split is empty", split.as_str())));
        }
        Ok(Batches { data: self, order, pos: 0, split, opts: opts.clone() })
    }

    /// Resized, optionally augmented, normalized image of record `idx`.
    fn prepare(&mut self, idx: usize, position: usize, split: Split, opts: &BatchOptions) -> Result<Tensor, DataError> {
        let img = resize_bilinear(self.image(idx)?, opts.size, opts.size)?;
        let img = if split == Split::Train {
            let mut rng = derived_rng(opts.seed, &[stream::AUGMENT, position as u64]);
            opts.augment.augment(&img, &mut rng)?
        } else {
            img
        };
        normalize(&img, &opts.stats)
    }
}

pub struct Batches<'a> {
    data: &'a mut Dataset,
    order: Vec<usize>,
    pos: usize,
    split: Split,
    opts: BatchOptions,
}

impl Batches<'_> {
    pub fn n_batches(&self) -> usize {
        self.order.len().div_ceil(self.opts.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.opts.batch_size).min(self.order.len());
        let records = self.order[self.pos..end].to_vec();
        let start = self.pos;
        self.pos = end;
        let mut images = Vec::with_capacity(records.len());
        for (k, &idx) in records.iter().enumerate() {
            match self.data.prepare(idx, start + k, self.split, &self.opts) {
                Ok(img) => images.push(img),
                Err(e) => return Some(Err(e)),
            }
        }
        let labels = records.iter().map(|&i| self.data.manifest.records[i].label).collect();
        let images = Tensor::stack(&images).expect("images share a shape");
        Some(Ok(Batch { images, labels, records }))
    }
}
