use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Synthetic grating task: every class is one fixed oriented sinusoid,
/// samples add Gaussian pixel noise and are clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            train_per_class: 200,
            test_per_class: 50,
            image_size: 32,
            noise: 0.1,
        }
    }
}

/// Noise-free template of `class`, row-major `size * size`.
pub(crate) fn template(class: usize, num_classes: usize, size: usize) -> Vec<f64> {
    let angle = PI * class as f64 / num_classes as f64;
    let freq = 2.0 + (class % 2) as f64;
    let (c, s) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 * c + y as f64 * s) / size as f64;
            out.push(0.5 + 0.4 * (2.0 * PI * freq * u).sin());
        }
    }
    out
}

/// Balanced single-channel dataset; sample `i` has label `i % num_classes`.
pub fn synth_dataset(
    seed: u64,
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    noise: f64,
    split: Split,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::config("num_classes", "synthetic data needs at least 2 classes"));
    }
    if samples_per_class == 0 || image_size == 0 {
        return Err(Error::config("samples_per_class", "must be positive"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::config("noise", "must be a finite value >= 0"));
    }
    let which = match split {
        Split::Train => Stream::Data,
        Split::Test => Stream::TestData,
    };
    let mut rng = rng::stream(seed, which);
    let templates: Vec<Vec<f64>> = (0..num_classes).map(|k| template(k, num_classes, image_size)).collect();
    let count = num_classes * samples_per_class;
    let pixels = image_size * image_size;
    let mut data = Vec::with_capacity(count * pixels);
    let mut labels = Vec::with_capacity(count);
    let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("noise checked above"));
    for i in 0..count {
        let y = i % num_classes;
        labels.push(y);
        for &t in &templates[y] {
            let eps = normal.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            data.push((t + eps).clamp(0.0, 1.0));
        }
    }
    let images = Tensor::new(vec![count, 1, image_size, image_size], data)?;
    Dataset::new(images, labels, num_classes, split)
}

/// Train and test splits drawn from independent streams.
pub fn synth_split(seed: u64, cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    let train = synth_dataset(seed, cfg.num_classes, cfg.train_per_class, cfg.image_size, cfg.noise, Split::Train)?;
    let test = synth_dataset(seed, cfg.num_classes, cfg.test_per_class, cfg.image_size, cfg.noise, Split::Test)?;
    Ok((train, test))
}
