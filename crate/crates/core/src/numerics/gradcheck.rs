//! Central finite-difference verification of tape gradients.

use super::{NumericsError, ParamId, ParamStore, Tape, Var};

/// Gradients smaller than this on both sides are compared absolutely, so
/// round-off on near-zero coordinates does not register as relative error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares analytic gradients against `(f(p+h) − f(p−h)) / 2h` for every
/// coordinate of every tracked parameter. `f` must be deterministic.
pub fn grad_check<F, E>(store: &mut ParamStore, h: f64, mut f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<NumericsError>,
{
    store.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        if !tape.scalar(loss).is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" }.into());
        }
        tape.backward_into(loss, store)?;
    }

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" }.into());
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
    for id in ids {
        let analytic = store
            .grad(id)
            .cloned()
            .unwrap_or_else(|| super::Tensor::zeros(store.value(id).shape()));
        for j in 0..analytic.numel() {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.coordinates += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_form() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap());
        let a = Tensor::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, -0.3], vec![0.0, -0.3, 3.0]]).unwrap();
        let report = grad_check(&mut store, 1e-5, |tape, s| -> Result<Var, NumericsError> {
            let xv = tape.param(s, x);
            let av = tape.constant(a.clone());
            let ax = tape.matmul_nt(xv, av)?;
            let prod = tape.mul(ax, xv)?;
            Ok(tape.sum(prod))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
        assert_eq!(report.coordinates, 3);
    }

    #[test]
    fn softmax_cross_entropy_head() {
        let mut store = ParamStore::new();
        let w = store.register(
            "w",
            Tensor::matrix(3, 4, (0..12).map(|i| ((i * 7) as f64 * 0.13).sin()).collect()).unwrap(),
        );
        let z = Tensor::matrix(1, 4, vec![0.2, -0.4, 0.9, 0.1]).unwrap();
        let report = grad_check(&mut store, 1e-5, |tape, s| -> Result<Var, NumericsError> {
            let wv = tape.param(s, w);
            let zv = tape.constant(z.clone());
            let logits = tape.matmul_nt(zv, wv)?;
            let p = tape.softmax(logits)?;
            tape.nll(p, 2)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(1.0));
        let res = grad_check(&mut store, 1e-5, |tape, s| -> Result<Var, NumericsError> {
            let wv = tape.param(s, w);
            Ok(tape.scale(wv, f64::INFINITY))
        });
        assert!(matches!(res, Err(NumericsError::NonFinite { .. })));
    }
}
