//! Named parameter storage shared by every layer of a model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent; counted in parameter totals.
    Trainable,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, std) truncated to two standard deviations.
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
    /// Gradient slot; same shape as `value` when present.
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

pub fn sample_init<T: Scalar, R: Rng>(init: Init, shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, T::one()),
        Init::Uniform(b) => Tensor::from_fn(shape, |_| T::of(rng.random_range(-b..=b))),
        Init::TruncNormal(std) => Tensor::from_fn(shape, |_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        }),
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    /// Allocates every spec in order, drawing initial values from `rng`.
    pub fn from_specs<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let value = sample_init(spec.init, &spec.shape, rng)?;
            store.insert(&spec.name, value, spec.kind)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(contract(format!("parameter {name} registered twice")));
        }
        self.entries.insert(name.to_string(), ParamEntry { value, kind, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| contract(format!("unknown parameter {name}")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| contract(format!("unknown parameter {name}")))
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "param set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter {name}")))?;
        if e.value.shape() != grad.shape() {
            return Err(Error::Dimension {
                op: "param grad",
                lhs: e.value.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        e.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn trainable_count(&self) -> u64 {
        self.entries
            .values()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len() as u64)
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            kind: e.kind,
                            grad: e.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }

    /// FNV-1a over names, shapes and value bits; a cheap fingerprint for
    /// reproducibility checks.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::checkpoint::Fnv1a::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            for &d in e.value.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(&v.f64().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncated_normal_stays_in_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = sample_init(Init::TruncNormal(0.02), &[1000], &mut rng).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean = t.sum() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2]).unwrap(), ParamKind::Trainable).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2]).unwrap(), ParamKind::Trainable).is_err());
    }

    #[test]
    fn grad_slot_must_match_shape() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2]).unwrap(), ParamKind::Trainable).unwrap();
        assert!(s.set_grad("a", Tensor::zeros(&[3]).unwrap()).is_err());
        assert!(s.set_grad("a", Tensor::zeros(&[2]).unwrap()).is_ok());
    }
}
