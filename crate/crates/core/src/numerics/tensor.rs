//! Dense row-major `f64` tensors and the forward kernels the tape is built on.

use super::NumericsError;

/// Dense real array. Almost everything in the pipeline is a matrix, so most
/// helpers assume rank 2 and treat a rank-1 tensor as a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericsError::Shape {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count; a rank-1 tensor is one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NumericsError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// `self · other` for `n×k` by `k×m`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `self · otherᵀ` for `n×k` by `m×k`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        let (n, k) = (self.rows(), self.cols());
        let (m, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = dot(a, b);
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// `selfᵀ · other` for `k×n` by `k×m`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        let (k, n) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return Err(NumericsError::Shape {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &other.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Mean over rows, producing a `1×cols` tensor.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        if r > 0 {
            for o in &mut out {
                *o /= r as f64;
            }
        }
        Tensor {
            shape: vec![1, c],
            data: out,
        }
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return Err(NumericsError::Shape {
                    op: "concat_rows",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }
}

/// Dot product with four independent partial sums, so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumericsError> {
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(NumericsError::NonFinite { op: "softmax" });
    }
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - max).exp();
            sum += *oj;
        }
        for oj in o.iter_mut() {
            *oj /= sum;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Smallest variance-plus-eps used as a denominator, so a constant row with
/// `eps = 0` maps to zeros instead of NaN.
pub const LAYER_NORM_FLOOR: f64 = 1e-24;

/// Per-row statistics retained for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Standardize each row over the last axis, then apply `gamma`/`beta`.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache), NumericsError> {
    let (r, d) = (x.rows(), x.cols());
    if gamma.numel() != d || beta.numel() != d {
        return Err(NumericsError::Shape {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let mut normalized = vec![0.0; r * d];
    let mut out = vec![0.0; r * d];
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).max(LAYER_NORM_FLOOR).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let nv = (row[j] - mean) * is;
            normalized[i * d + j] = nv;
            out[i * d + j] = nv * gamma.data[j] + beta.data[j];
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        LayerNormCache {
            normalized: Tensor {
                shape: x.shape.clone(),
                data: normalized,
            },
            inv_std,
        },
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.data_mut()[i * m + j] = s;
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn identity_matmul() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&b).unwrap(), b);
    }

    #[test]
    fn selector_row() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0], vec![5.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_variants_match_triple_loop() {
        let mut s = 7;
        let a = Tensor::matrix(3, 4, (0..12).map(|_| lcg(&mut s)).collect()).unwrap();
        let b = Tensor::matrix(4, 2, (0..8).map(|_| lcg(&mut s)).collect()).unwrap();
        let oracle = naive_matmul(&a, &b);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&oracle) < 1e-12);
        assert!(a.matmul_nt(&b.transpose()).unwrap().max_abs_diff(&oracle) < 1e-12);
        assert!(a.transpose().matmul_tn(&b).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&t).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap();
        let s = softmax_rows(&t).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
        let t = Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap();
        assert_eq!(softmax_rows(&t).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax_rows(&t), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let x = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let (y, _) = layer_norm(&x, &one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let x = Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-15).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);

        let mut s = 3;
        let x = Tensor::matrix(4, 8, (0..32).map(|_| 3.0 * lcg(&mut s)).collect()).unwrap();
        let eps = 1e-5;
        let (y, _) = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), eps).unwrap();
        for i in 0..4 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < eps);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &v in &[-2.0, -0.3, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(v + h) - gelu(v - h)) / (2.0 * h);
            assert!((fd - gelu_grad(v)).abs() < 1e-8);
        }
    }
}
