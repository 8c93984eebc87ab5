//! Named trainable tensors.

use rand::Rng;

use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: &str, shape: [usize; 4], init: Init, rng: &mut R) -> usize {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        let len = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            Init::Uniform(bound) => (0..len).map(|_| T::of(rng.random_range(-bound..=bound))).collect(),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..len).map(|_| T::of(rng.random_range(-bound..=bound))).collect()
            }
        };
        self.names.push(name.to_string());
        self.values.push(Tensor::from_vec(shape, data));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|t| Tensor::from_vec(t.shape, t.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect()))
                .collect(),
        }
    }
}
