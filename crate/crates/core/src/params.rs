//! Named parameter storage.
//!
//! Modules hold [`ParamId`]s rather than tensors, so one module layout can be
//! evaluated against stores of different precision (training in `f32`,
//! gradient checks in `f64`) and the optimizer and checkpoint code only ever
//! walk a flat, ordered list.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

pub struct Param<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Trainable tensors in declaration order.
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
}

/// Std of a unit normal truncated to +-2.
pub const TRUNC2_STD: f64 = 0.879_625_661;

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let tensor = Tensor::param(shape, data)?;
        self.params.push(Param { name, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Replaces the values of a parameter, keeping it a gradient leaf.
    pub fn set(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let shape = self.params[id.0].tensor.shape().to_vec();
        self.params[id.0].tensor = Tensor::param(&shape, data)?;
        Ok(())
    }

    pub fn set_tensor(&mut self, id: ParamId, tensor: &Tensor<T>) -> Result<()> {
        if tensor.shape() != self.get(id).shape() {
            return Err(Error::shape("set_tensor", format!(
                "{} expects {:?}, got {:?}",
                self.name(id),
                self.get(id).shape(),
                tensor.shape()
            )));
        }
        self.params[id.0].tensor = tensor.clone();
        Ok(())
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

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Scalars held by parameters whose name starts with `prefix`.
    pub fn scalar_count_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            p.tensor.data().iter().for_each(|v| v.write_le(&mut buf));
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies detached from gradient tracking, for inference.
    pub fn frozen(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.detached(false),
                })
                .collect(),
        }
    }

    /// Same layout, values converted to another element type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: Tensor::param(
                        p.tensor.shape(),
                        p.tensor.data().iter().map(|v| U::of(v.f64())).collect(),
                    )
                    .expect("finite parameters stay finite under cast"),
                })
                .collect(),
        }
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Element> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        self.store.register(name, shape, vec![T::zero(); n])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        self.store.register(name, shape, vec![T::one(); n])
    }

    /// Normal(0, std) truncated to +-2 std by resampling.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break T::of(z * std);
                }
            })
            .collect();
        self.store.register(name, shape, data)
    }

    /// He-normal, for layers followed by ReLU. The +-2 std truncation shrinks
    /// the spread, so the std is rescaled to keep the realized variance at 2/fan_in.
    pub fn he_normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.trunc_normal(name, shape, (2.0 / fan_in as f64).sqrt() / TRUNC2_STD)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.random_range(-bound..=bound)))
            .collect();
        self.store.register(name, shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checksum_is_seed_deterministic() {
        let build = |seed| {
            let mut store = ParamStore::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut init = Init::new(&mut store, &mut rng);
            init.trunc_normal("w", &[4, 4], 0.02).unwrap();
            init.zeros("b", &[4]).unwrap();
            store.checksum()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }

    #[test]
    fn truncated_normal_stays_within_two_std() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = Init::new(&mut store, &mut rng)
            .trunc_normal("w", &[1000], 0.02)
            .unwrap();
        assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.register("a", &[1], vec![0.0]).unwrap();
        assert!(store.register("a", &[1], vec![0.0]).is_err());
    }
}
