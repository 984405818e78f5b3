//! Reconstruction of a missing modality from retrieved same-modality token
//! embeddings: average the retrieved matrices, filter the average in the
//! frequency domain with a learnable complex multiplier, then stabilize with
//! dropout, a skip term and layer normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::numerics::{dropout_mask, half_bins, ParamId, ParamStore, Tape, Tensor, Var};
use crate::retriever::RetrievedContext;

/// How the skip connection around the filter is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResidualStyle {
    /// `LayerNorm(x̃ + Dropout(x̃))`.
    Literal,
    /// `LayerNorm(x̄ + Dropout(x̃))`, residual around the filter sublayer.
    Sublayer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub dropout: f64,
    pub residual_style: ResidualStyle,
    /// Small enough that `LayerNorm(2x) = LayerNorm(x)` to ~1e-12.
    pub ln_eps: f64,
    pub init_noise: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            dropout: 0.1,
            residual_style: ResidualStyle::Literal,
            ln_eps: 1e-12,
            init_noise: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ModalityFilter {
    re: ParamId,
    im: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Learnable half-spectrum filters and layer-norm affines for both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub config: GeneratorConfig,
    text: ModalityFilter,
    image: ModalityFilter,
}

impl FilterBank {
    /// Registers near-identity filters (`re = 1 + ε·noise`, `im = ε·noise`).
    pub fn register(
        store: &mut ParamStore,
        n: usize,
        m: usize,
        d: usize,
        config: GeneratorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut make = |prefix: &str, len: usize, rng: &mut ChaCha8Rng| {
            let bins = half_bins(len);
            let re = (0..bins * d)
                .map(|_| 1.0 + config.init_noise * normal.sample(rng))
                .collect();
            let im = (0..bins * d).map(|_| config.init_noise * normal.sample(rng)).collect();
            ModalityFilter {
                re: store.register(
                    format!("{prefix}.filter_re"),
                    Tensor::matrix(bins, d, re).expect("shape"),
                ),
                im: store.register(
                    format!("{prefix}.filter_im"),
                    Tensor::matrix(bins, d, im).expect("shape"),
                ),
                gamma: store.register(format!("{prefix}.ln_gamma"), Tensor::full(&[1, d], 1.0)),
                beta: store.register(format!("{prefix}.ln_beta"), Tensor::zeros(&[1, d])),
            }
        };
        let text = make("generator.text", n, rng);
        let image = make("generator.image", m, rng);
        Self { config, text, image }
    }

    fn parts(&self, modality: Modality) -> ModalityFilter {
        match modality {
            Modality::Text => self.text,
            Modality::Image => self.image,
        }
    }

    /// Real and imaginary filter parameter handles.
    pub fn filter_ids(&self, modality: Modality) -> (ParamId, ParamId) {
        let p = self.parts(modality);
        (p.re, p.im)
    }

    pub fn affine_ids(&self, modality: Modality) -> (ParamId, ParamId) {
        let p = self.parts(modality);
        (p.gamma, p.beta)
    }
}

/// Element-wise mean of the retrieved token matrices of `modality`.
pub fn average_context(ctx: &RetrievedContext, bank: &MemoryBank, modality: Modality) -> Result<Tensor> {
    if ctx.is_empty() {
        return Err(Error::Precondition("cannot average an empty context".into()));
    }
    let mats = ctx.token_matrices(bank, modality);
    let mut acc = Tensor::zeros(mats[0].shape());
    for m in &mats {
        for (a, v) in acc.data_mut().iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    Ok(acc.scale(1.0 / mats.len() as f64))
}

/// `irfft(W ⊙ rfft(x̄), n)` along the sequence axis.
pub fn frequency_filter(
    tape: &mut Tape,
    store: &ParamStore,
    filters: &FilterBank,
    modality: Modality,
    xbar: Var,
) -> Result<Var> {
    let (re, im) = filters.filter_ids(modality);
    let re = tape.param(store, re);
    let im = tape.param(store, im);
    Ok(tape.spectral_filter(xbar, re, im)?)
}

/// Dropout, skip connection and layer norm. `dropout_rng` is `Some` only in
/// training mode.
pub fn stabilize(
    tape: &mut Tape,
    store: &ParamStore,
    filters: &FilterBank,
    modality: Modality,
    xtilde: Var,
    xbar: Var,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let cfg = filters.config;
    let dropped = match dropout_rng {
        Some(rng) if cfg.dropout > 0.0 => {
            let mask = dropout_mask(tape.value(xtilde).shape(), cfg.dropout, rng);
            let mask = tape.constant(mask);
            tape.mul(xtilde, mask)?
        }
        _ => xtilde,
    };
    let skip = match cfg.residual_style {
        ResidualStyle::Literal => xtilde,
        ResidualStyle::Sublayer => xbar,
    };
    let summed = tape.add(skip, dropped)?;
    let (g, b) = filters.affine_ids(modality);
    let g = tape.param(store, g);
    let b = tape.param(store, b);
    Ok(tape.layer_norm(summed, g, b, cfg.ln_eps)?)
}

/// Filter + stabilize applied to an already-averaged input `xbar`. With
/// `use_filter = false` the frequency filter is skipped.
pub fn refine(
    tape: &mut Tape,
    store: &ParamStore,
    filters: &FilterBank,
    modality: Modality,
    xbar: Var,
    use_filter: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let xtilde = if use_filter {
        frequency_filter(tape, store, filters, modality, xbar)?
    } else {
        xbar
    };
    stabilize(tape, store, filters, modality, xtilde, xbar, dropout_rng)
}

/// Reconstructed embedding for a missing `modality`, shaped like the real one.
pub fn generate_missing(
    tape: &mut Tape,
    store: &ParamStore,
    filters: &FilterBank,
    ctx: &RetrievedContext,
    bank: &MemoryBank,
    modality: Modality,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let xbar = average_context(ctx, bank, modality)?;
    let xbar = tape.constant(xbar);
    refine(tape, store, filters, modality, xbar, true, dropout_rng)
}

/// Random stand-in for a missing modality, used by the padding ablation.
pub fn padding_fill(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::matrix(rows, d, (0..rows * d).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{BankDims, MemoryEntry};
    use crate::numerics::layer_norm;
    use crate::retriever::{Channel, RetrievedEntry};

    fn bank(k: usize, n: usize, d: usize, seed: u64) -> MemoryBank {
        let dims = BankDims { n, m: n, d, classes: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let entries = (0..k)
            .map(|i| {
                let mut v = |len: usize| (0..len).map(|_| normal.sample(&mut rng) as f32).collect::<Vec<_>>();
                MemoryEntry {
                    text_global: v(d),
                    image_global: v(d),
                    text_tokens: v(n * d),
                    image_tokens: v(n * d),
                    label: (i % 2) as u32,
                    source_id: i as u64,
                }
            })
            .collect();
        MemoryBank::from_entries(dims, entries).unwrap()
    }

    fn ctx_of(indices: &[usize]) -> RetrievedContext {
        RetrievedContext {
            channel: Channel::Vision,
            entries: indices
                .iter()
                .map(|&i| RetrievedEntry {
                    index: i,
                    source_id: i as u64,
                    label: i % 2,
                    score: 0.0,
                })
                .collect(),
            degraded: false,
        }
    }

    fn identity_bank(store: &mut ParamStore, n: usize, d: usize) -> FilterBank {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let config = GeneratorConfig {
            init_noise: 0.0,
            ..Default::default()
        };
        FilterBank::register(store, n, n, d, config, &mut rng)
    }

    #[test]
    fn average_examples() {
        let b = bank(5, 4, 3, 1);
        let one = average_context(&ctx_of(&[2]), &b, Modality::Text).unwrap();
        assert_eq!(one, b.tokens(2, Modality::Text));
        let all = average_context(&ctx_of(&[0, 1, 2, 3, 4]), &b, Modality::Image).unwrap();
        let mut oracle = Tensor::zeros(&[4, 3]);
        for i in 0..5 {
            for (o, v) in oracle.data_mut().iter_mut().zip(b.tokens(i, Modality::Image).data()) {
                *o += v;
            }
        }
        let oracle = oracle.scale(1.0 / 5.0);
        assert!(all.max_abs_diff(&oracle) < 1e-12);
        let perm = average_context(&ctx_of(&[3, 1, 4, 0, 2]), &b, Modality::Image).unwrap();
        assert!(perm.max_abs_diff(&all) < 1e-12);
        assert!(average_context(&ctx_of(&[]), &b, Modality::Text).is_err());
    }

    #[test]
    fn cancellation_gives_zero() {
        let dims = BankDims {
            n: 2,
            m: 2,
            d: 2,
            classes: 2,
        };
        let x = vec![1.0f32, -2.0, 0.5, 3.0];
        let entries = [x.clone(), x.iter().map(|v| -v).collect::<Vec<_>>()]
            .into_iter()
            .enumerate()
            .map(|(i, t)| MemoryEntry {
                text_global: vec![1.0, 0.0],
                image_global: vec![1.0, 0.0],
                text_tokens: t.clone(),
                image_tokens: t,
                label: 0,
                source_id: i as u64,
            })
            .collect();
        let b = MemoryBank::from_entries(dims, entries).unwrap();
        let avg = average_context(&ctx_of(&[0, 1]), &b, Modality::Text).unwrap();
        assert!(avg.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_and_zero_filters() {
        let mut store = ParamStore::new();
        let fb = identity_bank(&mut store, 6, 3);
        let x = padding_fill(6, 3, 9);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = frequency_filter(&mut tape, &store, &fb, Modality::Text, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-9);

        let (re, im) = fb.filter_ids(Modality::Text);
        store.get_mut(re).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(im).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = frequency_filter(&mut tape, &store, &fb, Modality::Text, xv).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn stabilize_eval_is_scale_invariant_standardization() {
        let mut store = ParamStore::new();
        let fb = identity_bank(&mut store, 1, 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let y = stabilize(&mut tape, &store, &fb, Modality::Text, x, x, None).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rate_dropout_matches_eval() {
        let mut store = ParamStore::new();
        let mut fb = identity_bank(&mut store, 4, 3);
        fb.config.dropout = 0.0;
        let x = padding_fill(4, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t1 = Tape::new();
        let a = t1.constant(x.clone());
        let y1 = stabilize(&mut t1, &store, &fb, Modality::Image, a, a, Some(&mut rng)).unwrap();
        let mut t2 = Tape::new();
        let b = t2.constant(x);
        let y2 = stabilize(&mut t2, &store, &fb, Modality::Image, b, b, None).unwrap();
        assert_eq!(t1.value(y1), t2.value(y2));
    }

    #[test]
    fn seeded_mask_replay() {
        let mut store = ParamStore::new();
        let mut fb = identity_bank(&mut store, 4, 5);
        fb.config.dropout = 0.3;
        let x = padding_fill(4, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = stabilize(&mut tape, &store, &fb, Modality::Text, xv, xv, Some(&mut rng)).unwrap();

        let mut replay = ChaCha8Rng::seed_from_u64(77);
        let mask = dropout_mask(&[4, 5], 0.3, &mut replay);
        let summed = x.zip_map(&mask, |v, k| v + v * k);
        let (oracle, _) = layer_norm(&summed, &Tensor::full(&[5], 1.0), &Tensor::zeros(&[5]), 1e-12).unwrap();
        assert!(tape.value(y).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn identity_generation_is_layer_normed_copy_and_permutation_invariant() {
        let b = bank(3, 8, 4, 5);
        let mut store = ParamStore::new();
        let fb = identity_bank(&mut store, 8, 4);
        let mut tape = Tape::new();
        let y = generate_missing(&mut tape, &store, &fb, &ctx_of(&[1]), &b, Modality::Text, None).unwrap();
        let (oracle, _) = layer_norm(
            &b.tokens(1, Modality::Text),
            &Tensor::full(&[4], 1.0),
            &Tensor::zeros(&[4]),
            1e-12,
        )
        .unwrap();
        assert!(tape.value(y).max_abs_diff(&oracle) < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let fb = FilterBank::register(&mut store, 8, 8, 4, GeneratorConfig::default(), &mut rng);
        let mut t1 = Tape::new();
        let y1 = generate_missing(&mut t1, &store, &fb, &ctx_of(&[0, 1, 2]), &b, Modality::Image, None).unwrap();
        let mut t2 = Tape::new();
        let y2 = generate_missing(&mut t2, &store, &fb, &ctx_of(&[2, 0, 1]), &b, Modality::Image, None).unwrap();
        assert!(t1.value(y1).max_abs_diff(t2.value(y2)) < 1e-12);
        assert_eq!(t1.value(y1).shape(), &[8, 4]);
    }
}
