//! Label-augmented classifier: class scores are similarities between the
//! pooled representation and the rows of the label matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Single-label softmax with cross-entropy.
    Softmax,
    /// Independent per-class sigmoid with binary cross-entropy.
    Sigmoid,
}

/// `1×C` scores `Z·P̃ᵀ` passed through the head nonlinearity.
pub fn predict(tape: &mut Tape, store: &ParamStore, z: Var, label_matrix: ParamId, head: HeadKind) -> Result<Var> {
    let lm = tape.param(store, label_matrix);
    let logits = tape.matmul_nt(z, lm)?;
    Ok(match head {
        HeadKind::Softmax => tape.softmax(logits)?,
        HeadKind::Sigmoid => tape.sigmoid(logits),
    })
}

/// Cross-entropy for the softmax head, mean binary cross-entropy against the
/// one-hot target for the sigmoid head.
pub fn loss(tape: &mut Tape, probs: Var, label: usize, head: HeadKind) -> Result<Var> {
    let classes = tape.value(probs).numel();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(match head {
        HeadKind::Softmax => tape.nll(probs, label)?,
        HeadKind::Sigmoid => {
            let mut target = vec![0.0; classes];
            target[label] = 1.0;
            tape.bce(probs, &target)?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn setup(rows: Vec<Vec<f64>>) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("label_matrix", Tensor::from_rows(&rows).unwrap());
        (store, id)
    }

    #[test]
    fn equal_rows_give_uniform() {
        let (store, id) = setup(vec![vec![0.3, -0.1]; 4]);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 2, vec![0.7, 0.2]).unwrap());
        let p = predict(&mut tape, &store, z, id, HeadKind::Softmax).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let l = loss(&mut tape, p, 2, HeadKind::Softmax).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aligned_row_wins_and_matches_oracle() {
        let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let (store, id) = setup(rows.clone());
        let mut tape = Tape::new();
        let zv = [0.1, 0.9, -0.4];
        let z = tape.constant(Tensor::matrix(1, 3, zv.to_vec()).unwrap());
        let p = predict(&mut tape, &store, z, id, HeadKind::Softmax).unwrap();
        let probs = tape.value(p).data().to_vec();
        let logits: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().zip(&zv).map(|(a, b)| a * b).sum())
            .collect();
        let denom: f64 = logits.iter().map(|v| v.exp()).sum();
        for (p, l) in probs.iter().zip(&logits) {
            assert!((p - l.exp() / denom).abs() < 1e-14);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, 1);
    }

    #[test]
    fn sigmoid_head_and_label_range() {
        let (store, id) = setup(vec![vec![0.0, 0.0]; 2]);
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let p = predict(&mut tape, &store, z, id, HeadKind::Sigmoid).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
        let l = loss(&mut tape, p, 0, HeadKind::Sigmoid).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            loss(&mut tape, p, 2, HeadKind::Softmax),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
