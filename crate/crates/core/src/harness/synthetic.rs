//! Seeded synthetic bimodal classification data.
//!
//! Text: each position draws from the label's topic tokens with probability
//! `0.25·separation`, otherwise uniformly from the vocabulary. Image: each
//! instance picks one of the label's prototypes and adds unit Gaussian noise,
//! the prototype scaled by `0.5·separation`. A prototype is a patch vector
//! shared across patches plus a smaller per-patch pattern. A `noise_fraction` of instances
//! has pure-noise text, another `noise_fraction` pure-noise image, so each
//! modality alone is only partially informative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub separation: f64,
    pub noise_fraction: f64,
    pub prototypes: usize,
    pub topic_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            n_test: 500,
            separation: 2.0,
            noise_fraction: 0.3,
            prototypes: 2,
            topic_size: 8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if model.vocab <= 1 + model.classes * self.topic_size {
            return Err(Error::Config(format!(
                "vocab {} is too small for {} classes with {} topic tokens each",
                model.vocab, model.classes, self.topic_size
            )));
        }
        if self.topic_size == 0 || self.prototypes == 0 {
            return Err(Error::Config("topic_size and prototypes must be positive".into()));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be finite and non-negative".into()));
        }
        if !(0.0..=0.5).contains(&self.noise_fraction) {
            return Err(Error::Config("noise_fraction must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Generates full-modality train/val/test splits with consecutive ids.
pub fn generate_synthetic(data: &DataConfig, model: &ModelConfig, seed: u64) -> Result<Dataset> {
    data.validate(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7379_6e74_6865_7469);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (c, n, m, p) = (model.classes, model.n, model.m, model.patch_dim);
    // Each prototype is one patch-feature vector shared by every patch, plus
    // a smaller per-patch pattern, so mean pooling keeps most of it.
    let prototypes: Vec<Vec<Vec<f64>>> = (0..c)
        .map(|_| {
            (0..data.prototypes)
                .map(|_| {
                    let shared: Vec<f64> = (0..p).map(|_| normal.sample(&mut rng)).collect();
                    (0..m * p)
                        .map(|i| shared[i % p] + 0.5 * normal.sample(&mut rng))
                        .collect()
                })
                .collect()
        })
        .collect();
    let topic_prob = (0.25 * data.separation).min(1.0);
    let amplitude = 0.5 * data.separation;
    let vocab = model.vocab as u32;
    let topic = data.topic_size as u32;

    let total = data.n_train + data.n_val + data.n_test;
    let mut all = Vec::with_capacity(total);
    for id in 0..total as u64 {
        let label = rng.random_range(0..c);
        let role: f64 = rng.random();
        let text_informative = role >= data.noise_fraction;
        let image_informative = !(data.noise_fraction..2.0 * data.noise_fraction).contains(&role);
        let tokens: Vec<u32> = (0..n)
            .map(|_| {
                if text_informative && rng.random::<f64>() < topic_prob {
                    1 + label as u32 * topic + rng.random_range(0..topic)
                } else {
                    rng.random_range(1..vocab)
                }
            })
            .collect();
        let proto = &prototypes[label][rng.random_range(0..data.prototypes)];
        let scale = if image_informative { amplitude } else { 0.0 };
        let patches: Vec<f64> = proto.iter().map(|&mu| scale * mu + normal.sample(&mut rng)).collect();
        let image = Tensor::matrix(m, p, patches).expect("shape");
        all.push(Instance::new(id, Some(tokens), Some(image), label)?);
    }
    let test = all.split_off(data.n_train + data.n_val);
    let val = all.split_off(data.n_train);
    Ok(Dataset { train: all, val, test })
}
