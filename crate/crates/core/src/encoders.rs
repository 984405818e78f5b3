//! Frozen random unimodal encoders.
//!
//! They play two roles: the embedding layer that turns tokens/patches into
//! `n×d` / `m×d` matrices, and the global encoders producing the unit-norm
//! query vectors used for retrieval. All weights are drawn once from a seeded
//! generator, rounded to `f32`, and never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Instance, Modality};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub vocab: usize,
    pub patch_dim: usize,
    pub d: usize,
    pub seed: u64,
}

/// Gaussian matrix with entries rounded to `f32` so it survives the binary
/// file formats bit-exactly.
pub(crate) fn gaussian_f32(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng) as f32 as f64).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoders {
    pub config: EncoderConfig,
    pub token_table: Tensor,
    pub patch_projection: Tensor,
    pub text_pool: Tensor,
    pub image_pool: Tensor,
}

/// Retrieval query. `retrievable` is false when the pooled vector was zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding {
    pub vector: Vec<f64>,
    pub retrievable: bool,
}

impl FrozenEncoders {
    pub fn new(config: EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x656e_636f_6465_7273);
        let d = config.d;
        let token_table = gaussian_f32(&mut rng, config.vocab, d, 1.0);
        let patch_projection = gaussian_f32(&mut rng, config.patch_dim, d, 1.0 / (config.patch_dim as f64).sqrt());
        let text_pool = gaussian_f32(&mut rng, d, d, 1.0 / (d as f64).sqrt());
        let image_pool = gaussian_f32(&mut rng, d, d, 1.0 / (d as f64).sqrt());
        Self {
            config,
            token_table,
            patch_projection,
            text_pool,
            image_pool,
        }
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn embed_text(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.d;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.config.vocab,
                });
            }
            data.extend_from_slice(self.token_table.row(t as usize));
        }
        Ok(Tensor::matrix(tokens.len(), d, data)?)
    }

    pub fn embed_image(&self, patches: &Tensor) -> Result<Tensor> {
        Ok(patches.matmul(&self.patch_projection)?)
    }

    /// Token-level embedding of one modality of `instance`.
    pub fn embed_modality(&self, instance: &Instance, modality: Modality) -> Result<Tensor> {
        let missing = || Error::MissingModality {
            id: instance.id,
            modality,
        };
        match modality {
            Modality::Text => self.embed_text(instance.text().ok_or_else(missing)?),
            Modality::Image => self.embed_image(instance.image().ok_or_else(missing)?),
        }
    }

    /// Mean-pool, project, L2-normalize.
    pub fn encode_global(&self, tokens: &Tensor, modality: Modality) -> Result<GlobalEmbedding> {
        if tokens.rows() == 0 {
            return Err(Error::Precondition("cannot pool an empty token matrix".into()));
        }
        let pool = match modality {
            Modality::Text => &self.text_pool,
            Modality::Image => &self.image_pool,
        };
        let projected = tokens.mean_rows().matmul(pool)?;
        let norm = projected.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Ok(GlobalEmbedding {
                vector: vec![0.0; self.config.d],
                retrievable: false,
            });
        }
        Ok(GlobalEmbedding {
            vector: projected.data().iter().map(|v| v / norm).collect(),
            retrievable: true,
        })
    }
}
