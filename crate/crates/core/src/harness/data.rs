//! Deterministic procedural image domains.
//!
//! Each class is an oriented sinusoidal grating with its own frequency and
//! colour mix, plus a small per-class brightness offset. Every sample jitters phase, orientation and frequency, overlays
//! a class-agnostic distractor grating at a random orientation and adds
//! Gaussian noise. Class prototypes depend on `(name, seed)`, so differently
//! named domains have unrelated classes.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 3;
const TRAIN_FRACTION: f64 = 0.8;
const NOISE_STD: f64 = 0.25;
/// Amplitude of the class-agnostic grating relative to the class grating.
const DISTRACTOR: f64 = 0.5;
/// Half-width of the per-class, per-channel brightness offset.
const OFFSET_SPREAD: f64 = 0.05;

/// Which part of a [`Dataset`] to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A labelled image collection with a fixed train/val partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    /// `[n, channels, H, W]`, values in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// A materialized subset of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl DataSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images cast to `T`, rows `start..start + count`.
    pub fn batch<T: Scalar>(&self, start: usize, count: usize) -> Result<(Tensor<T>, &[usize])> {
        Ok((
            self.images.slice_rows(start, count)?.cast(),
            &self.labels[start..start + count],
        ))
    }
}

impl Dataset {
    /// Builds a dataset from existing images, splitting 80/20 by `seed`.
    pub fn from_parts(
        name: &str,
        seed: u64,
        num_classes: usize,
        images: Tensor<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if images.rank() != 4 || images.shape()[0] != n {
            bail!(Input, "images {:?} do not match {n} labels", images.shape());
        }
        if num_classes < 2 || n < num_classes {
            bail!(
                Input,
                "need num_classes >= 2 and n >= num_classes (got {num_classes}, {n})"
            );
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            bail!(Input, "label {bad} out of range for {num_classes} classes");
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(derive_seed(seed, name, 1)));
        let n_train = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n - 1);
        let mut train = order[..n_train].to_vec();
        let mut val = order[n_train..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        Ok(Dataset {
            name: name.to_string(),
            seed,
            num_classes,
            images,
            labels,
            train,
            val,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn split(&self, split: Split) -> Result<DataSplit> {
        let idx = self.indices(split);
        Ok(DataSplit {
            images: self.images.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

struct ClassPattern {
    angle: f64,
    freq: f64,
    colour: [f64; CHANNELS],
    offset: [f64; CHANNELS],
}

fn class_patterns(name: &str, seed: u64, num_classes: usize) -> Vec<ClassPattern> {
    let mut rng = rng_for(derive_seed(seed, name, 0));
    let angle0 = rng.random::<f64>() * std::f64::consts::PI;
    (0..num_classes)
        .map(|c| {
            // spread orientations evenly so classes stay distinguishable
            let angle = angle0 + std::f64::consts::PI * c as f64 / num_classes as f64;
            let freq = 1.5 + 3.0 * rng.random::<f64>();
            let mut colour = [0.0; CHANNELS];
            let mut offset = [0.0; CHANNELS];
            for ch in 0..CHANNELS {
                colour[ch] = 0.15 + 0.1 * rng.random::<f64>();
                offset[ch] = 0.5 + OFFSET_SPREAD * (2.0 * rng.random::<f64>() - 1.0);
            }
            ClassPattern {
                angle,
                freq,
                colour,
                offset,
            }
        })
        .collect()
}

/// Generates `n` images of size `image_size` (3 channels) with labels
/// cycling through `0..num_classes`.
pub fn gen_domain(
    name: &str,
    seed: u64,
    num_classes: usize,
    n: usize,
    image_size: usize,
) -> Result<Dataset> {
    if num_classes < 2 || n < num_classes {
        bail!(
            Input,
            "need num_classes >= 2 and n >= num_classes (got {num_classes}, {n})"
        );
    }
    if image_size == 0 {
        bail!(Input, "image_size must be positive");
    }
    let patterns = class_patterns(name, seed, num_classes);
    let s = image_size;
    let plane = s * s;
    let mut data = vec![0f32; n * CHANNELS * plane];
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    for (i, img) in data.chunks_exact_mut(CHANNELS * plane).enumerate() {
        let mut rng = rng_for(derive_seed(seed, name, 2 + i as u64));
        let p = &patterns[labels[i]];
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        let angle = p.angle + 0.15 * (rng.random::<f64>() - 0.5);
        let freq = p.freq * (0.9 + 0.2 * rng.random::<f64>());
        let (sin, cos) = angle.sin_cos();
        let d_angle = rng.random::<f64>() * std::f64::consts::PI;
        let d_freq = 1.5 + 3.0 * rng.random::<f64>();
        let d_phase = rng.random::<f64>() * std::f64::consts::TAU;
        let (d_sin, d_cos) = d_angle.sin_cos();
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 * cos + y as f64 * sin) / s as f64;
                let wave = (std::f64::consts::TAU * freq * u + phase).sin();
                let du = (x as f64 * d_cos + y as f64 * d_sin) / s as f64;
                let dwave = DISTRACTOR * (std::f64::consts::TAU * d_freq * du + d_phase).sin();
                for ch in 0..CHANNELS {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let v = p.offset[ch] + p.colour[ch] * (wave + dwave) + NOISE_STD * noise;
                    img[ch * plane + y * s + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let images = Tensor::from_vec(&[n, CHANNELS, s, s], data)?;
    Dataset::from_parts(name, seed, num_classes, images, labels)
}
