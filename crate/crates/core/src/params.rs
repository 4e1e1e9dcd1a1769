//! Named parameter sets and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Params {
        let map = self
            .map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        Params { map }
    }

    /// Adds every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Params) {
        for (k, v) in &other.map {
            self.map.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// SHA-256 over names, shapes and raw bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Fingerprint restricted to names accepted by `filter`.
    pub fn fingerprint_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let map = self
            .map
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Params { map }.fingerprint()
    }

    /// Checks that `self` holds exactly the names and shapes in `expected`.
    pub fn check_shapes(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if self.len() != expected.len() {
            let known: std::collections::BTreeSet<&str> =
                expected.iter().map(|(n, _)| n.as_str()).collect();
            let orphan = self.names().find(|n| !known.contains(n.as_str()));
            return Err(Error::Checkpoint(format!(
                "unexpected parameter {orphan:?}"
            )));
        }
        Ok(())
    }
}

/// Whether a parameter is a bias or a normalisation weight; these are
/// excluded from weight decay.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.contains("norm") || name.contains("bn")
}

/// How a parameter tensor is initialised.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Xavier/Glorot uniform for a `[fan_in, fan_out]` weight.
    XavierUniform,
    Normal(f64),
}

pub fn init_tensor(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::filled(shape, 1.0),
        Init::XavierUniform => {
            let (fan_in, fan_out) = (shape[0], shape[shape.len() - 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-a..a));
            t
        }
        Init::Normal(std) => {
            let n = Normal::new(0.0, std).expect("positive std");
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = n.sample(rng));
            t
        }
    }
}

/// Parameters registered on one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Registers every parameter; names accepted by `trainable` become
    /// gradient-tracking leaves, the rest constants.
    pub fn bind(
        tape: &mut Tape,
        params: &Params,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, value) in params.iter() {
            let v = tape.leaf(value.clone(), trainable(name))?;
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Names vars that are already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Gradients for every bound parameter accepted by `filter`.
    pub fn collect(&self, grads: &mut Gradients, filter: impl Fn(&str) -> bool) -> Params {
        let mut out = Params::new();
        for (name, var) in &self.vars {
            if filter(name) {
                if let Some(g) = grads.take(*var) {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
