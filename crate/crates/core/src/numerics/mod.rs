//! Dense tensors, reverse-mode differentiation, real FFT and AdamW.

pub mod adamw;
pub mod fft;
pub mod gradcheck;
mod params;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use fft::{half_bins, irfft, rfft, Spectrum};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{DiffTensor, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{layer_norm, softmax_rows, Tensor};

use rand::Rng;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite gradient for parameter `{param}`")]
    NanGradient { param: String },
    #[error("internal tape error: {0}")]
    Internal(String),
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, otherwise
/// `1/(1-rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 - rate;
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = if rate > 0.0 && rng.random::<f64>() < rate {
            0.0
        } else {
            1.0 / keep
        };
    }
    t
}
