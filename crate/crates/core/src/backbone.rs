//! Frozen toy multimodal transformer.
//!
//! Pre-norm encoder layers (multi-head self-attention and a GELU feed-forward
//! block, each wrapped in a residual), a final layer norm and a tanh pooler.
//! Prompt blocks are prepended at the input of layer `b` and carried to the
//! output. All weights are seeded, rounded to `f32` and never trained.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::gaussian_f32;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::prompter::PromptSet;

pub const BACKBONE_MAGIC: &[u8; 8] = b"RGPTBKB1";
pub const BACKBONE_VERSION: u32 = 1;

/// Which row of the final sequence the pooler reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolPosition {
    /// Row 0 of the extended sequence (a prompt row when prompts are present).
    First,
    /// The first row after the prompt block (the first text token).
    FirstAfterPrompts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub n: usize,
    pub m: usize,
    /// 1-based layer at whose input prompts are inserted.
    pub insert_layer: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.insert_layer == 0 || self.insert_layer > self.layers {
            return Err(Error::Config(format!(
                "insert layer {} must lie in 1..={}",
                self.insert_layer, self.layers
            )));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.n + self.m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<LayerWeights>,
    /// Row 0 text, row 1 image.
    pub type_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    pub pooler_w: Tensor,
    pub pooler_b: Tensor,
    pub ln_eps: f64,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6261_636b_626f_6e65);
        let d = config.d;
        let f = config.ffn_mult * d;
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_gamma: Tensor::full(&[1, d], 1.0),
                ln1_beta: Tensor::zeros(&[1, d]),
                wq: gaussian_f32(&mut rng, d, d, sd),
                bq: gaussian_f32(&mut rng, 1, d, 0.02),
                wk: gaussian_f32(&mut rng, d, d, sd),
                bk: gaussian_f32(&mut rng, 1, d, 0.02),
                wv: gaussian_f32(&mut rng, d, d, sd),
                bv: gaussian_f32(&mut rng, 1, d, 0.02),
                wo: gaussian_f32(&mut rng, d, d, sd),
                bo: gaussian_f32(&mut rng, 1, d, 0.02),
                ln2_gamma: Tensor::full(&[1, d], 1.0),
                ln2_beta: Tensor::zeros(&[1, d]),
                w1: gaussian_f32(&mut rng, d, f, sd),
                b1: gaussian_f32(&mut rng, 1, f, 0.02),
                w2: gaussian_f32(&mut rng, f, d, sf),
                b2: gaussian_f32(&mut rng, 1, d, 0.02),
            })
            .collect();
        Ok(Self {
            config,
            layers,
            type_embeddings: gaussian_f32(&mut rng, 2, d, 0.5),
            position_embeddings: gaussian_f32(&mut rng, config.seq_len(), d, 0.5),
            final_gamma: Tensor::full(&[1, d], 1.0),
            final_beta: Tensor::zeros(&[1, d]),
            pooler_w: gaussian_f32(&mut rng, d, d, sd),
            pooler_b: gaussian_f32(&mut rng, 1, d, 0.02),
            ln_eps: 1e-5,
        })
    }

    /// Modality-type plus position embeddings added to `[text; image]`.
    pub fn input_bias(&self) -> Tensor {
        let (n, d) = (self.config.n, self.config.d);
        let mut bias = self.position_embeddings.clone();
        for r in 0..self.config.seq_len() {
            let ty = if r < n { 0 } else { 1 };
            for c in 0..d {
                bias.data_mut()[r * d + c] += self.type_embeddings.get(ty, c);
            }
        }
        bias
    }

    /// `h¹ = [text; image] + type + position`, `L×d` with `L = n + m`.
    pub fn assemble_input(&self, tape: &mut Tape, text: Var, image: Var) -> Result<Var> {
        let (n, m, d) = (self.config.n, self.config.m, self.config.d);
        let (ts, is) = (tape.value(text).shape().to_vec(), tape.value(image).shape().to_vec());
        if ts != [n, d] || is != [m, d] {
            return Err(Error::Numerics(crate::numerics::NumericsError::Shape {
                op: "assemble_input",
                lhs: ts,
                rhs: is,
            }));
        }
        let seq = tape.concat_rows(&[text, image])?;
        let bias = tape.constant(self.input_bias());
        Ok(tape.add(seq, bias)?)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &Tensor, b: &Tensor) -> Result<Var> {
        let w = tape.constant(w.clone());
        let b = tape.constant(b.clone());
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    fn norm(&self, tape: &mut Tape, x: Var, gamma: &Tensor, beta: &Tensor) -> Result<Var> {
        let g = tape.constant(gamma.clone());
        let b = tape.constant(beta.clone());
        Ok(tape.layer_norm(x, g, b, self.ln_eps)?)
    }

    /// One pre-norm encoder layer.
    pub fn layer_forward(&self, tape: &mut Tape, layer: &LayerWeights, h: Var) -> Result<Var> {
        let d = self.config.d;
        let heads = self.config.heads;
        let dh = d / heads;
        let x = self.norm(tape, h, &layer.ln1_gamma, &layer.ln1_beta)?;
        let q = self.linear(tape, x, &layer.wq, &layer.bq)?;
        let k = self.linear(tape, x, &layer.wk, &layer.bk)?;
        let v = self.linear(tape, x, &layer.wv, &layer.bv)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax(s)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let attn = self.linear(tape, o, &layer.wo, &layer.bo)?;
        let h = tape.add(h, attn)?;
        let x = self.norm(tape, h, &layer.ln2_gamma, &layer.ln2_beta)?;
        let f = self.linear(tape, x, &layer.w1, &layer.b1)?;
        let f = tape.gelu(f);
        let f = self.linear(tape, f, &layer.w2, &layer.b2)?;
        Ok(tape.add(h, f)?)
    }

    /// Runs layers `1..b−1` on `h¹`, prepends `[Pᵗ; Pᵛ; Pˡ]` at layer `b`, runs
    /// the rest and applies the final norm. Output has `2l+1+L` rows with
    /// prompts, `L` without.
    pub fn forward_with_prompts(&self, tape: &mut Tape, h1: Var, prompts: Option<&PromptSet>) -> Result<Var> {
        let mut h = h1;
        for (i, layer) in self.layers.iter().enumerate() {
            if i + 1 == self.config.insert_layer {
                if let Some(p) = prompts {
                    h = tape.concat_rows(&[p.text, p.vision, p.label, h])?;
                }
            }
            h = self.layer_forward(tape, layer, h)?;
        }
        self.norm(tape, h, &self.final_gamma, &self.final_beta)
    }

    /// `Z = tanh(row · W + b)` for the chosen row.
    pub fn pool(&self, tape: &mut Tape, hn: Var, row: usize) -> Result<Var> {
        let first = tape.slice_rows(hn, row, 1)?;
        let z = self.linear(tape, first, &self.pooler_w, &self.pooler_b)?;
        Ok(tape.tanh(z))
    }

    fn all_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|l| l.tensors()).collect();
        out.extend([
            &self.type_embeddings,
            &self.position_embeddings,
            &self.final_gamma,
            &self.final_beta,
            &self.pooler_w,
            &self.pooler_b,
        ]);
        out
    }

    /// Writes the `RGPTBKB1` weight file: magic, `u32` version, layers, d,
    /// heads, n, m, ffn_mult, then every tensor as little-endian `f32` in a
    /// fixed order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config;
        let mut out = Vec::new();
        out.extend_from_slice(BACKBONE_MAGIC);
        for v in [
            BACKBONE_VERSION,
            c.layers as u32,
            c.d as u32,
            c.heads as u32,
            c.n as u32,
            c.m as u32,
            c.ffn_mult as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.all_tensors() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Loads weights saved by [`Backbone::save`]; architecture fields must
    /// match `config` (the insertion layer and seed are taken from `config`).
    pub fn load(path: impl AsRef<Path>, config: BackboneConfig) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, config)
    }

    pub fn from_bytes(bytes: &[u8], config: BackboneConfig) -> Result<Self> {
        let fmt = |offset: usize, reason: String| Error::Format {
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 36 {
            return Err(fmt(bytes.len(), "truncated header".into()));
        }
        if &bytes[..8] != BACKBONE_MAGIC {
            return Err(fmt(0, "bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"));
        if word(0) != BACKBONE_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "backbone file",
                found: word(0),
                expected: BACKBONE_VERSION,
            });
        }
        let found = [word(1), word(2), word(3), word(4), word(5), word(6)].map(|v| v as usize);
        let expected = [
            config.layers,
            config.d,
            config.heads,
            config.n,
            config.m,
            config.ffn_mult,
        ];
        if found != expected {
            return Err(fmt(
                12,
                format!("architecture {found:?} does not match config {expected:?}"),
            ));
        }
        let mut model = Self::new(config)?;
        let mut pos = 36;
        let mut targets: Vec<&mut Tensor> = model.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect();
        targets.extend([
            &mut model.type_embeddings,
            &mut model.position_embeddings,
            &mut model.final_gamma,
            &mut model.final_beta,
            &mut model.pooler_w,
            &mut model.pooler_b,
        ]);
        for t in targets {
            for v in t.data_mut() {
                if pos + 4 > bytes.len() {
                    return Err(fmt(pos, "truncated tensor data".into()));
                }
                *v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as f64;
                pos += 4;
            }
        }
        if pos != bytes.len() {
            return Err(fmt(pos, "trailing bytes".into()));
        }
        Ok(model)
    }
}
