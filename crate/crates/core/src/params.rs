//! Named parameter registry and its per-forward tensor binding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered registry of learnable tensors. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("param", format!("{name}: shape {:?} vs {} values", shape, data.len())));
        }
        self.entries.push(NamedParam { name: name.to_string(), shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedParam> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedParam> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    /// Overwrites the values of an existing parameter.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if p.data.len() != data.len() {
            return Err(Error::shape("param", format!("{name}: expected {} values", p.data.len())));
        }
        p.data = data;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_size(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Fresh leaf tensors for one forward pass.
    pub fn bind(&self, trainable: bool) -> Result<ParamSet> {
        let mut index = BTreeMap::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let t = if trainable {
                Tensor::param(&e.shape, e.data.clone())?
            } else {
                Tensor::new(&e.shape, e.data.clone())?
            };
            tensors.push(t);
            index.insert(e.name.clone(), i);
        }
        Ok(ParamSet { tensors, index })
    }
}

/// Tensors bound from a [`ParamStore`], in registry order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Gradients in registry order (`None` where backward never reached).
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.tensors.iter().map(|t| t.grad()).collect()
    }
}

/// Uniform Glorot initialization scaled by `gain`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Vec<f64> {
    let limit = gain * libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect()
}

/// Independent `N(0, scale²)` entries.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

impl ParamSet {
    /// Pairs registry names with the given tensors.
    pub fn with_names(names: &[String], tensors: Vec<Tensor>) -> ParamSet {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ParamSet { tensors, index }
    }
}

impl ParamStore {
    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Current values as constant tensors, registry order.
    pub fn values(&self) -> Result<Vec<Tensor>> {
        self.entries.iter().map(|e| Tensor::new(&e.shape, e.data.clone())).collect()
    }
}
