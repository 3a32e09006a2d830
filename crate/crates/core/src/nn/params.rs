use indexmap::IndexMap;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameters in insertion order. The order is the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Tensor>,
}

/// Gradients keyed by parameter name.
pub type GradMap = IndexMap<String, Tensor>;

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Replace every value with the same-named entry of `other`, which must have
    /// exactly the same names and shapes.
    pub fn load_from(&mut self, other: ParameterStore) -> Result<()> {
        let missing: Vec<String> = self
            .names()
            .filter(|n| !other.entries.contains_key(*n))
            .cloned()
            .collect();
        let extra: Vec<String> = other
            .names()
            .filter(|n| !self.entries.contains_key(*n))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParamNames { missing, extra });
        }
        for (name, value) in &self.entries {
            let new = &other.entries[name];
            if new.shape() != value.shape() {
                return Err(Error::contract(format!(
                    "parameter {name}: model expects shape {:?}, checkpoint has {:?}",
                    value.shape(),
                    new.shape()
                )));
            }
        }
        // adopt the model's order, not the file's
        for (name, value) in self.entries.iter_mut() {
            *value = other.entries[name].clone();
        }
        Ok(())
    }
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    /// Substitute the variable used for `name`, e.g. to differentiate through one parameter.
    pub fn set(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
        *slot = var;
        Ok(())
    }

    pub fn grads(&self, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get(v).clone()))
            .collect()
    }
}

/// Deterministic parameter construction: each tensor draws from its own
/// stream keyed by `(seed, name)`.
pub struct Init {
    seed: u64,
    store: ParameterStore,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            store: ParameterStore::new(),
        }
    }

    fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Tensor {
        let mut r = rng::stream(self.seed, name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape and data agree")
    }

    /// Weight `[d_in, d_out]` uniform in ±sqrt(1/d_in), bias zero.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
        let w = self.uniform(&format!("{prefix}.weight"), &[d_in, d_out], (1.0 / d_in as f64).sqrt());
        self.store.insert(format!("{prefix}.weight"), w)?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))
    }

    pub fn linear_zero(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.store
            .insert(format!("{prefix}.weight"), Tensor::zeros(&[d_in, d_out]))?;
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))
    }

    pub fn embedding(&mut self, prefix: &str, vocab: usize, dim: usize) -> Result<()> {
        let name = format!("{prefix}.weight");
        let t = self.uniform(&name, &[vocab, dim], 1.0);
        self.store.insert(name, t)
    }

    pub fn residual_mlp(&mut self, prefix: &str, dim: usize, hidden: usize, depth: usize) -> Result<()> {
        for i in 0..depth {
            self.linear(&format!("{prefix}.{i}.fc1"), dim, hidden)?;
            self.linear(&format!("{prefix}.{i}.fc2"), hidden, dim)?;
        }
        Ok(())
    }

    pub fn finish(self) -> ParameterStore {
        self.store
    }
}
