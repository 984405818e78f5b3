//! Tape-based reverse-mode differentiation over a fixed set of matrix ops.
//!
//! Every op appends a node whose parents have strictly smaller indices, so the
//! tape is already in topological order and the backward pass is one reverse
//! sweep. Nodes that cannot reach a tracked parameter are skipped entirely.

use super::fft::{self, Spectrum};
use super::tensor::{self, LayerNormCache};
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SpectralFilter {
        x: Var,
        filter_re: Var,
        filter_im: Var,
        spectrum: Spectrum,
    },
    Nll {
        probs: Var,
        target: usize,
    },
    Bce {
        probs: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Constant | Param(_) => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | AddRow(a, b) | Mul(a, b) => vec![*a, *b],
            Transpose(a)
            | Scale(a, _)
            | SliceRows(a, _)
            | SliceCols(a, _)
            | GatherRows(a, _)
            | MeanRows(a)
            | Sum(a)
            | Softmax(a)
            | Gelu(a)
            | Tanh(a)
            | Sigmoid(a) => vec![*a],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            SpectralFilter {
                x,
                filter_re,
                filter_im,
                ..
            } => vec![*x, *filter_re, *filter_im],
            Nll { probs, .. } | Bce { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            ref other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf bound to a registered parameter. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        if p.requires_grad {
            self.push(p.value.clone(), Op::Param(id))
        } else {
            self.push(p.value.clone(), Op::Constant)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "add")?;
        let v = x.zip_map(y, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a length-`d` row to every row of an `n×d` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (x, r) = (self.value(a), self.value(row));
        let d = x.cols();
        if r.numel() != d {
            return Err(NumericsError::Shape {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        let mut v = x.clone();
        for (i, val) in v.data_mut().iter_mut().enumerate() {
            *val += r.data()[i % d];
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "mul")?;
        let v = x.zip_map(y, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(NumericsError::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            let c = t.cols();
            for i in 0..rows {
                data[i * total + offset..i * total + offset + c].copy_from_slice(t.row(i));
            }
            offset += c;
        }
        let v = Tensor::matrix(rows, total, data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(NumericsError::Shape {
                op: "slice_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let c = x.cols();
        let v = Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(NumericsError::Shape {
                op: "slice_cols",
                lhs: x.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let v = Tensor::matrix(rows, len, data)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx {
            if i >= x.rows() {
                return Err(NumericsError::Shape {
                    op: "gather_rows",
                    lhs: x.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(x.row(i));
        }
        let v = Tensor::matrix(idx.len(), x.cols(), data)?;
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = tensor::softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let (v, cache) = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, cache }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// `irfft(filter ⊙ rfft(x), n)` with a half-spectrum complex filter stored
    /// as separate real and imaginary `(n/2+1)×d` matrices.
    pub fn spectral_filter(&mut self, x: Var, filter_re: Var, filter_im: Var) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let n = xv.rows();
        let spectrum = fft::rfft(xv)?;
        let (wr, wi) = (self.value(filter_re), self.value(filter_im));
        let expected = [spectrum.bins, spectrum.channels];
        for w in [wr, wi] {
            if w.rows() != expected[0] || w.cols() != expected[1] {
                return Err(NumericsError::Shape {
                    op: "spectral_filter",
                    lhs: expected.to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
        }
        let mut filtered = Spectrum::zeros(spectrum.bins, spectrum.channels);
        for i in 0..filtered.re.len() {
            let (zr, zi) = (spectrum.re[i], spectrum.im[i]);
            let (a, b) = (wr.data()[i], wi.data()[i]);
            filtered.re[i] = a * zr - b * zi;
            filtered.im[i] = a * zi + b * zr;
        }
        let v = fft::irfft(&filtered, n)?;
        Ok(self.push(
            v,
            Op::SpectralFilter {
                x,
                filter_re,
                filter_im,
                spectrum,
            },
        ))
    }

    /// Negative log-likelihood of class `target` under a `1×C` distribution.
    pub fn nll(&mut self, probs: Var, target: usize) -> Result<Var, NumericsError> {
        let p = self.value(probs);
        if target >= p.numel() {
            return Err(NumericsError::Shape {
                op: "nll",
                lhs: p.shape().to_vec(),
                rhs: vec![target],
            });
        }
        let v = -p.data()[target].max(PROB_FLOOR).ln();
        Ok(self.push(Tensor::scalar(v), Op::Nll { probs, target }))
    }

    /// Mean binary cross-entropy between per-class probabilities and targets.
    pub fn bce(&mut self, probs: Var, targets: &[f64]) -> Result<Var, NumericsError> {
        let p = self.value(probs);
        if targets.len() != p.numel() {
            return Err(NumericsError::Shape {
                op: "bce",
                lhs: p.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = targets.len() as f64;
        let v = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&q, &t)| {
                let q = q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / c;
        Ok(self.push(
            Tensor::scalar(v),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for p in node.op.parents() {
                if p.0 >= idx {
                    return Err(NumericsError::Internal(format!(
                        "node {idx} depends on later node {}",
                        p.0
                    )));
                }
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[i].as_ref()) {
                store.accumulate(*id, g)?;
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let send = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => acc.add_assign(&delta),
                None => grads[v.0] = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.matmul_nt(self.value(*b))?, grads);
                }
                if self.wants(*b) {
                    send(*b, self.value(*a).matmul_tn(g)?, grads);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    send(*a, g.matmul(self.value(*b))?, grads);
                }
                if self.wants(*b) {
                    send(*b, g.matmul_tn(self.value(*a))?, grads);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose().reshape(self.value(*a).shape().to_vec())?, grads),
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone(), grads);
                if self.wants(*row) {
                    let summed = g.mean_rows().scale(g.rows() as f64);
                    send(*row, summed.reshape(self.value(*row).shape().to_vec())?, grads);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.zip_map(self.value(*b), |x, y| x * y), grads);
                }
                if self.wants(*b) {
                    send(*b, g.zip_map(self.value(*a), |x, y| x * y), grads);
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s), grads),
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pt = self.value(*p);
                    let n = pt.numel();
                    if self.wants(*p) {
                        let slice = Tensor::new(pt.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                        send(*p, slice, grads);
                    }
                    offset += pt.rows() * c;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for p in parts {
                    let pt = self.value(*p);
                    let c = pt.cols();
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        send(*p, Tensor::new(pt.shape().to_vec(), data)?, grads);
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut full = Tensor::zeros(src.shape());
                let c = src.cols();
                full.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                send(*a, full, grads);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut full = Tensor::zeros(src.shape());
                let (c, len) = (src.cols(), g.cols());
                for i in 0..g.rows() {
                    full.data_mut()[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                send(*a, full, grads);
            }
            Op::GatherRows(a, idxs) => {
                let src = self.value(*a);
                let mut full = Tensor::zeros(src.shape());
                let c = src.cols();
                for (r, &i) in idxs.iter().enumerate() {
                    for j in 0..c {
                        full.data_mut()[i * c + j] += g.data()[r * c + j];
                    }
                }
                send(*a, full, grads);
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let r = src.rows() as f64;
                let c = src.cols();
                let mut full = Tensor::zeros(src.shape());
                for (i, v) in full.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i % c] / r;
                }
                send(*a, full, grads);
            }
            Op::Sum(a) => send(*a, Tensor::full(self.value(*a).shape(), g.data()[0]), grads),
            Op::Softmax(a) => {
                let c = out.cols();
                let mut dx = Tensor::zeros(out.shape());
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = y.iter().zip(gi).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = y[j] * (gi[j] - dot);
                    }
                }
                send(*a, dx, grads);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let gam = self.value(*gamma);
                let (r, d) = (out.rows(), out.cols());
                let xhat = &cache.normalized;
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; d];
                    for i in 0..r {
                        for (j, acc) in gg.iter_mut().enumerate() {
                            *acc += g.data()[i * d + j] * xhat.data()[i * d + j];
                        }
                    }
                    send(*gamma, Tensor::new(gam.shape().to_vec(), gg)?, grads);
                }
                if self.wants(*beta) {
                    let gb = g.mean_rows().scale(r as f64);
                    send(*beta, gb.reshape(self.value(*beta).shape().to_vec())?, grads);
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(out.shape());
                    for i in 0..r {
                        let gi = g.row(i);
                        let xh = xhat.row(i);
                        let dxhat: Vec<f64> = (0..d).map(|j| gi[j] * gam.data()[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx.data_mut()[i * d + j] = cache.inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    send(*x, dx, grads);
                }
            }
            Op::Gelu(a) => {
                let src = self.value(*a);
                send(*a, g.zip_map(src, |q, v| q * tensor::gelu_grad(v)), grads);
            }
            Op::Tanh(a) => send(*a, g.zip_map(out, |q, y| q * (1.0 - y * y)), grads),
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |q, y| q * y * (1.0 - y)), grads),
            Op::SpectralFilter {
                x,
                filter_re,
                filter_im,
                spectrum,
            } => {
                let n = out.rows();
                let gy = fft::irfft_adjoint(g)?;
                let (wr, wi) = (self.value(*filter_re), self.value(*filter_im));
                let len = gy.re.len();
                if self.wants(*filter_re) || self.wants(*filter_im) {
                    let mut gwr = vec![0.0; len];
                    let mut gwi = vec![0.0; len];
                    for i in 0..len {
                        let (zr, zi) = (spectrum.re[i], spectrum.im[i]);
                        gwr[i] = gy.re[i] * zr + gy.im[i] * zi;
                        gwi[i] = -gy.re[i] * zi + gy.im[i] * zr;
                    }
                    send(*filter_re, Tensor::new(wr.shape().to_vec(), gwr)?, grads);
                    send(*filter_im, Tensor::new(wi.shape().to_vec(), gwi)?, grads);
                }
                if self.wants(*x) {
                    let mut gz = Spectrum::zeros(gy.bins, gy.channels);
                    for i in 0..len {
                        let (a, b) = (wr.data()[i], wi.data()[i]);
                        gz.re[i] = gy.re[i] * a + gy.im[i] * b;
                        gz.im[i] = -gy.re[i] * b + gy.im[i] * a;
                    }
                    send(*x, fft::rfft_adjoint(&gz, n)?, grads);
                }
            }
            Op::Nll { probs, target } => {
                let p = self.value(*probs);
                let mut dp = Tensor::zeros(p.shape());
                let py = p.data()[*target];
                if py > PROB_FLOOR {
                    dp.data_mut()[*target] = -g.data()[0] / py;
                }
                send(*probs, dp, grads);
            }
            Op::Bce { probs, targets } => {
                let p = self.value(*probs);
                let c = targets.len() as f64;
                let mut dp = Tensor::zeros(p.shape());
                for (i, (&q, &t)) in p.data().iter().zip(targets).enumerate() {
                    if q > PROB_FLOOR && q < 1.0 - PROB_FLOOR {
                        dp.data_mut()[i] = g.data()[0] * (-(t / q) + (1.0 - t) / (1.0 - q)) / c;
                    }
                }
                send(*probs, dp, grads);
            }
        }
        Ok(())
    }
}
