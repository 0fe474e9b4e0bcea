//! Named parameter sets, initialization, and the Adam optimizer.

use std::ops::Index;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.entries.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Record every parameter on `tape`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { names: self.entries.iter().map(|(n, _)| n.clone()).collect(), vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy values from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return dim_err("parameter count mismatch");
        }
        for ((n, t), (m, u)) in self.entries.iter_mut().zip(&other.entries) {
            if n != m || t.shape() != u.shape() {
                return dim_err(format!("parameter {n} {:?} vs {m} {:?}", t.shape(), u.shape()));
            }
            *t = u.clone();
        }
        Ok(())
    }

    /// Prefix every name with `prefix`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        ParamSet { entries: self.entries.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect() }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        for (n, t) in other.entries {
            self.insert(n, t);
        }
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    /// Substitute another variable for `name` (e.g. a probe in a gradient check).
    pub fn replace(&mut self, name: &str, v: Var<'t>) {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i] = v;
    }

    /// Gradients for every parameter in declaration order (zeros if unused).
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.get_or_zeros(v)).collect()
    }
}

impl<'t> Index<&str> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, name: &str) -> &Var<'t> {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.vars[i]
    }
}

/// Sum gradient lists elementwise (fixed order keeps results reproducible).
pub fn accumulate(acc: &mut Option<Vec<Tensor>>, g: Vec<Tensor>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
        None => *acc = Some(g),
    }
}

pub fn grads_finite(g: &[Tensor]) -> bool {
    g.iter().all(|t| t.is_finite())
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

/// He-style uniform initialization for a layer with `fan_in` inputs.
pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Glorot-style uniform initialization.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, t: 0, m: vec![], v: vec![] }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] + self.weight_decay * pd[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
