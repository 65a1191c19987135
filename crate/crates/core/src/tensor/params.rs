use rand::Rng;

use super::{Real, Tensor};
use crate::error::{NasError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub weight_decay: bool,
}

/// Named trainable tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, weight_decay: bool) -> ParamId {
        self.params.push(Parameter { name: name.into(), value, grad: None, weight_decay });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±sqrt(3 / fan_in)`, i.e. unit-variance-preserving for
    /// linear maps. `fan_in` is the product of all but the leading dimension.
    pub fn add_fan_in_uniform(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> ParamId {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let bound = (3.0 / fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("numel matches"), true)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Overwrites a parameter's value, checking the shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(NasError::structural(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }
}
