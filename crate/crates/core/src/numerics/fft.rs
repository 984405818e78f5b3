//! Real half-spectrum FFT along the sequence (row) axis of an `n×d` matrix.
//!
//! Convention: the forward transform is unnormalized, the inverse divides by
//! `n`. The inverse ignores the imaginary parts of the DC bin and (for even
//! `n`) the Nyquist bin, so its output is always real.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{NumericsError, Tensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Half spectrum of a real `n×channels` signal, stored row-major as
/// `(n/2 + 1) × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub bins: usize,
    pub channels: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn zeros(bins: usize, channels: usize) -> Self {
        Self {
            bins,
            channels,
            re: vec![0.0; bins * channels],
            im: vec![0.0; bins * channels],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bins, self.channels)
    }
}

/// Number of half-spectrum bins for a length-`n` real signal.
pub fn half_bins(n: usize) -> usize {
    n / 2 + 1
}

fn transform(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let fft = if inverse {
            planner.plan_fft_inverse(buf.len())
        } else {
            planner.plan_fft_forward(buf.len())
        };
        fft.process(buf);
    });
}

/// Forward real FFT of every column.
pub fn rfft(x: &Tensor) -> Result<Spectrum, NumericsError> {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 {
        return Err(NumericsError::Shape {
            op: "rfft",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let bins = half_bins(n);
    let mut out = Spectrum::zeros(bins, d);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..d {
        for (t, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x.data()[t * d + c], 0.0);
        }
        transform(&mut buf, false);
        for (k, v) in buf.iter().take(bins).enumerate() {
            out.re[k * d + c] = v.re;
            out.im[k * d + c] = v.im;
        }
    }
    Ok(out)
}

/// Inverse of [`rfft`]: rebuilds the Hermitian full spectrum and returns the
/// real `n×channels` signal scaled by `1/n`.
pub fn irfft(s: &Spectrum, n: usize) -> Result<Tensor, NumericsError> {
    if n == 0 || s.bins != half_bins(n) {
        return Err(NumericsError::Shape {
            op: "irfft",
            lhs: vec![s.bins, s.channels],
            rhs: vec![n],
        });
    }
    let d = s.channels;
    let mut out = vec![0.0; n * d];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let inv_n = 1.0 / n as f64;
    for c in 0..d {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        buf[0] = Complex64::new(s.re[c], 0.0);
        for k in 1..s.bins {
            let v = Complex64::new(s.re[k * d + c], s.im[k * d + c]);
            if 2 * k == n {
                buf[k] = Complex64::new(v.re, 0.0);
            } else {
                buf[k] = v;
                buf[n - k] = v.conj();
            }
        }
        transform(&mut buf, true);
        for t in 0..n {
            out[t * d + c] = buf[t].re * inv_n;
        }
    }
    Tensor::matrix(n, d, out)
}

/// Adjoint of [`rfft`] as a linear map: given upstream gradients on the
/// spectrum, returns the gradient on the `n×channels` input.
pub fn rfft_adjoint(g: &Spectrum, n: usize) -> Result<Tensor, NumericsError> {
    if s_mismatch(g, n) {
        return Err(NumericsError::Shape {
            op: "rfft_adjoint",
            lhs: vec![g.bins, g.channels],
            rhs: vec![n],
        });
    }
    let d = g.channels;
    let mut out = vec![0.0; n * d];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..d {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (k, b) in buf.iter_mut().take(g.bins).enumerate() {
            *b = Complex64::new(g.re[k * d + c], g.im[k * d + c]);
        }
        transform(&mut buf, true);
        for t in 0..n {
            out[t * d + c] = buf[t].re;
        }
    }
    Tensor::matrix(n, d, out)
}

/// Adjoint of [`irfft`]: maps a gradient on the real output back onto the
/// half spectrum. Imaginary gradients at DC/Nyquist come out as zero.
pub fn irfft_adjoint(g: &Tensor) -> Result<Spectrum, NumericsError> {
    let n = g.rows();
    let mut s = rfft(g)?;
    let d = s.channels;
    for k in 0..s.bins {
        let weight = if k == 0 || 2 * k == n { 1.0 } else { 2.0 } / n as f64;
        for c in 0..d {
            s.re[k * d + c] *= weight;
            s.im[k * d + c] *= weight;
        }
    }
    Ok(s)
}

fn s_mismatch(s: &Spectrum, n: usize) -> bool {
    n == 0 || s.bins != half_bins(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_and_nyquist_signals() {
        let x = Tensor::matrix(4, 1, vec![1.0; 4]).unwrap();
        let s = rfft(&x).unwrap();
        assert_eq!(s.bins, 3);
        assert!((s.re[0] - 4.0).abs() < 1e-12);
        assert!(s.re[1].abs() < 1e-12 && s.re[2].abs() < 1e-12);

        let x = Tensor::matrix(4, 1, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let s = rfft(&x).unwrap();
        assert!(s.re[0].abs() < 1e-12 && s.re[1].abs() < 1e-12);
        assert!((s.re[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn dc_only_spectrum_inverts_to_c_over_n() {
        let mut s = Spectrum::zeros(half_bins(5), 1);
        s.re[0] = 10.0;
        let x = irfft(&s, 5).unwrap();
        for &v in x.data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_count_mismatch_is_rejected() {
        let s = Spectrum::zeros(3, 2);
        assert!(irfft(&s, 7).is_err());
        assert!(irfft(&s, 4).is_ok());
        assert!(irfft(&s, 5).is_ok());
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <rfft(x), g> = <x, rfft_adjoint(g)> with the real inner product on (re, im).
        for n in [1usize, 2, 5, 8, 9] {
            let x = Tensor::matrix(n, 2, (0..2 * n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let mut g = Spectrum::zeros(half_bins(n), 2);
            for (i, (r, m)) in g.re.iter_mut().zip(g.im.iter_mut()).enumerate() {
                *r = (i as f64 * 0.9).cos();
                *m = (i as f64 * 1.3).sin();
            }
            let fx = rfft(&x).unwrap();
            let lhs: f64 = fx.re.iter().zip(&g.re).map(|(a, b)| a * b).sum::<f64>()
                + fx.im.iter().zip(&g.im).map(|(a, b)| a * b).sum::<f64>();
            let ag = rfft_adjoint(&g, n).unwrap();
            let rhs: f64 = x.data().iter().zip(ag.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "n={n}");

            let y = Tensor::matrix(n, 2, (0..2 * n).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
            let iy = irfft(&g, n).unwrap();
            let lhs: f64 = iy.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let ay = irfft_adjoint(&y).unwrap();
            let rhs: f64 = g.re.iter().zip(&ay.re).map(|(a, b)| a * b).sum::<f64>()
                + g.im.iter().zip(&ay.im).map(|(a, b)| a * b).sum::<f64>();
            assert!((lhs - rhs).abs() < 1e-10, "n={n}");
        }
    }
}
