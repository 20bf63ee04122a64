use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedParam {
    name: String,
    tensor: Tensor,
}

/// Named trainable tensors that persist across forward passes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor. Names are expected to be unique.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        self.params.push(NamedParam { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.tensor))
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let t = &mut self.params[id.0].tensor;
        if t.requires_grad() {
            t.accumulate_grad(grad);
        }
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) -> Result<(), TensorError> {
        let t = &mut self.params[id.0].tensor;
        if data.len() != t.numel() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: t.shape().to_vec(),
            });
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Plain gradient descent: `w -= lr * grad` for every parameter holding a gradient.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad.take() {
                p.tensor
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(w, g)| *w -= lr * g);
                p.tensor.grad = Some(g);
            }
        }
    }

    /// Copies parameter values from `other` for every name present in both stores.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize, TensorError> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.tensor.shape() != p.tensor.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "load_matching",
                        left: p.tensor.shape().to_vec(),
                        right: src.tensor.shape().to_vec(),
                    });
                }
                p.tensor.data_mut().copy_from_slice(src.tensor.data());
                n += 1;
            }
        }
        Ok(n)
    }
}
