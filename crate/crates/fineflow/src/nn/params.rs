use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Initialization rules. Weights are drawn in `f64` and cast, so a given
/// seed produces the same model at every precision (up to rounding).
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `N(0, gain^2/fan_in)`.
    FanInNormal { fan_in: usize, gain: f64 },
    Const(f64),
    Uniform(f64),
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Init::FanInNormal { fan_in, gain } => {
                let d = Normal::new(0.0, gain * (1.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Const(v) => vec![v; n],
            Init::Uniform(a) => {
                let d = Uniform::new_inclusive(-a, a).expect("valid range");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

/// Named parameter and buffer registry for one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    by_name: HashMap<String, usize>,
    buffer_by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            by_name: HashMap::new(),
            buffer_by_name: HashMap::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn init_param<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let vals = init.sample(shape.iter().product(), rng);
        self.add_param(name, Tensor::from_f64(shape, &vals)?)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.buffer_by_name.contains_key(&name) || self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        let id = self.buffers.len();
        self.buffer_by_name.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(id))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_by_name.get(name).copied().map(BufferId)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Same names and values at another precision; gradients reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
            buffer_by_name: self.buffer_by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a", Tensor::zeros(&[2])).unwrap();
        assert!(s.add_param("a", Tensor::zeros(&[2])).is_err());
        assert!(s.add_buffer("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn fan_in_init_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        let id = s
            .init_param("w", &[100, 400], Init::FanInNormal { fan_in: 400, gain: 1.0 }, &mut rng)
            .unwrap();
        let v = s.param(id).value.data();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var * 400.0 - 1.0).abs() < 0.05, "{var}");
    }
}
