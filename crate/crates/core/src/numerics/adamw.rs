//! AdamW with bias correction and decoupled weight decay.
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β1·m + (1−β1)·g
//! v ← β2·v + (1−β2)·g²
//! p ← p − lr · (m / (1−β1^t)) / (√(v / (1−β2^t)) + eps)
//! ```

use super::{NumericsError, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for every parameter of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let first: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second[index]
    }

    /// Applies one update using the gradients currently held in `store`.
    /// Parameters with `requires_grad = false` are left alone. A non-finite
    /// gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NumericsError> {
        if self.first.len() != store.len() {
            return Err(NumericsError::Shape {
                op: "adamw_step",
                lhs: vec![self.first.len()],
                rhs: vec![store.len()],
            });
        }
        for id in store.ids() {
            let p = store.get(id);
            if let Some(g) = p.grad.as_ref().filter(|_| p.requires_grad) {
                if !g.is_finite() {
                    return Err(NumericsError::NanGradient {
                        param: store.name(id).to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let g = g.data().to_vec();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                w[j] -= c.lr * c.weight_decay * w[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::scalar(w));
        (s, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (mut store, id) = scalar_store(0.75);
        let mut opt = AdamWState::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        for _ in 0..10 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.value(id).data(), &[0.75]);
        assert_eq!(opt.step, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias-corrected both are 1, so the update is lr / (1 + eps).
        let (mut store, id) = scalar_store(1.0);
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        let mut opt = AdamWState::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut store).unwrap();
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_magnitude_monotonically() {
        let (mut store, id) = scalar_store(1.0);
        let mut opt = AdamWState::new(
            &store,
            AdamWConfig {
                weight_decay: 0.1,
                lr: 1e-2,
                ..Default::default()
            },
        );
        let mut prev = 1.0;
        for _ in 0..50 {
            store.get_mut(id).grad = Some(Tensor::scalar(f64::EPSILON));
            opt.step(&mut store).unwrap();
            let w = store.value(id).data()[0];
            assert!(w.abs() < prev);
            prev = w.abs();
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, id) = scalar_store(1.0);
        store.get_mut(id).grad = Some(Tensor::scalar(f64::NAN));
        let mut opt = AdamWState::new(&store, AdamWConfig::default());
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(store.value(id).data(), &[1.0]);
        assert_eq!(opt.step, 0);
    }
}
