use std::sync::Arc;

use super::Tensor;
use super::tensor::Float;

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
    requires_grad: bool,
}

impl<T: Float> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Owns every parameter tensor of a model together with its gradient buffer.
///
/// Values are reference counted so a graph can hold them for the duration of a
/// forward/backward pass without copying; mutation goes through
/// [`ParamStore::value_mut`], which only copies if a graph is still alive.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            grad,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn shared_value(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    /// Simultaneous access to a value and its gradient, used by optimizers.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &Tensor<T>) {
        let p = &mut self.params[id.0];
        (Arc::make_mut(&mut p.value), &p.grad)
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.params[id.0].requires_grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.params[id.0].requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Global L2 norm over the gradients of the given parameters.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|&id| self.params[id.0].grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Element-type conversion of values (gradients reset to zero).
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out.add(p.name.clone(), p.value.cast());
            out.set_requires_grad(id, p.requires_grad);
        }
        out
    }
}
