//! Named-tensor storage for model parameters and gradients.

use std::collections::BTreeMap;

use num_traits::Float;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Scalar type the model runs in: `f32` for the pipeline, `f64` for
/// gradient verification.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64s(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64s(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64s(self) -> f64 {
        self
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_data(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn convert<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.to_f64s())).collect(),
        }
    }
}

/// The model's named parameter tensors. Iteration order is the sorted name
/// order, which doubles as the checkpoint manifest order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Shape(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing tensor `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Name of the first tensor holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn convert<G: Scalar>(&self) -> ParameterStore<G> {
        ParameterStore {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.convert()))
                .collect(),
        }
    }

    /// Bitwise equality of shapes and data.
    pub fn bit_eq(&self, other: &ParameterStore<F>) -> bool {
        if self.tensors.len() != other.tensors.len() {
            return false;
        }
        self.tensors.iter().zip(other.tensors.iter()).all(
            |((an, at), (bn, bt))| {
                an == bn
                    && at.shape() == bt.shape()
                    && at
                        .data()
                        .iter()
                        .zip(bt.data())
                        .all(|(x, y)| x.to_f64s().to_bits() == y.to_f64s().to_bits())
            },
        )
    }
}

/// Per-tensor gradient accumulators, keyed like the parameter store.
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    grads: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn zeros_like(params: &ParameterStore<F>) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("missing gradient `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing gradient `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.grads.iter()
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.grads
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    /// Scales every gradient, used to fold batch averaging into the
    /// accumulated sums.
    pub fn scale(&mut self, factor: F) {
        for t in self.grads.values_mut() {
            for g in t.data_mut() {
                *g *= factor;
            }
        }
    }
}

/// Standard normal draw via Box-Muller, so initialization does not depend on
/// distribution crates' internals.
pub fn gaussian<F: Scalar>(rng: &mut ChaCha12Rng, std: f64) -> F {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    let mag = (-2.0 * u1.ln()).sqrt();
    F::from_f64(std * mag * (2.0 * std::f64::consts::PI * u2).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::<f32>::from_data(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_data(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn clone_is_independent() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::filled(&[4], 1.0)).unwrap();
        let snapshot = store.clone();
        store.get_mut("w").data_mut()[0] = 9.0;
        assert_eq!(snapshot.get("w").data()[0], 1.0);
        assert_eq!(store.get("w").data()[0], 9.0);
    }

    #[test]
    fn non_finite_detection_names_tensor() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("a.ok", Tensor::filled(&[2], 1.0)).unwrap();
        store.insert("b.bad", Tensor::filled(&[2], 1.0)).unwrap();
        store.get_mut("b.bad").data_mut()[1] = f32::NAN;
        assert_eq!(store.first_non_finite(), Some("b.bad"));
    }

    #[test]
    fn gaussian_is_deterministic() {
        let mut a = rng_for(&[7]);
        let mut b = rng_for(&[7]);
        for _ in 0..32 {
            let x: f64 = gaussian(&mut a, 0.5);
            let y: f64 = gaussian(&mut b, 0.5);
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
