use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether decoupled weight decay applies (matrices yes; biases, norms and
    /// embeddings no).
    pub decay: bool,
}

/// Named parameters with matching gradient accumulators. Iteration order is
/// the lexicographic order of names, which fixes every reduction order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name, Param { value, grad, decay });
        Ok(())
    }

    /// Affine weight `[fan_in x fan_out]` drawn from uniform(±1/√fan_in).
    pub fn insert_affine_weight(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?, true)
    }

    /// Embedding table `[rows x width]` drawn from normal(0, 0.02).
    pub fn insert_embedding(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let dist = Normal::new(0.0, 0.02).expect("valid std");
        let data = (0..rows * width).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(vec![rows, width], data)?, false)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds computed gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if p.grad.shape() != g.shape() {
                return Err(Error::dim("accumulate", p.grad.shape(), g.shape()));
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Overwrites values from a loaded tensor list; names and shapes must match
    /// exactly.
    pub fn load_values(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in tensors {
            let p = self.get_mut(&name)?;
            if p.value.shape() != t.shape() {
                return Err(Error::dim("load_values", p.value.shape(), t.shape()));
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn export_values(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// SHA-256 over names, shapes and the bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
