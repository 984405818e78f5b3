use super::{NumericsError, Tensor};

/// A tensor that may carry a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    pub value: Tensor,
    pub requires_grad: bool,
    pub grad: Option<Tensor>,
}

impl DiffTensor {
    pub fn tracked(value: Tensor) -> Self {
        let grad = Some(Tensor::zeros(value.shape()));
        Self {
            value,
            requires_grad: true,
            grad,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        Self {
            value,
            requires_grad: false,
            grad: None,
        }
    }
}

/// Handle to a registered parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named registry of trainable tensors. Registration order is the iteration
/// order everywhere (optimizer state, serialization, gradient checks).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<DiffTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.params.push(DiffTensor::tracked(value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        let p = &mut self.params[id.0];
        p.requires_grad = on;
        if !on {
            p.grad = None;
        } else if p.grad.is_none() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor) -> Result<(), NumericsError> {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return Ok(());
        }
        let acc = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        if acc.numel() != g.numel() {
            return Err(NumericsError::Shape {
                op: "accumulate_grad",
                lhs: acc.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        acc.add_assign(g);
        Ok(())
    }

    /// Flat view of every parameter value, in registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &DiffTensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), self.names[i].as_str(), p))
    }
}
