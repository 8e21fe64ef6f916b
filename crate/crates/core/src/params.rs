//! Named parameter storage shared by the teacher and student networks.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named tensors. Names are dotted paths such as
/// `teacher.encoder.level0.conv.weight`; a *group* is any dotted prefix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor whose name appears in `other`; shapes must agree
    /// and every parameter of `self` must be present.
    pub fn load_from<'a>(&mut self, other: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.names.len()];
        for (name, value) in other {
            let Some(&i) = self.index.get(name) else {
                continue;
            };
            if self.tensors[i].shape() != value.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: stored shape {:?} does not match model shape {:?}",
                    value.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = value.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Malformed(format!(
                "checkpoint is missing parameter {}",
                self.names[i]
            )));
        }
        Ok(())
    }

    /// Inserts every parameter into `g` as a leaf; `trainable` decides which
    /// leaves track gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| g.leaf(t.clone(), trainable(name)))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and value bits of every parameter in `group`
    /// (all parameters for an empty group).
    pub fn digest(&self, group: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter().filter(|(n, _)| in_group(n, group)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Graph variables for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps caller-created variables, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects the gradient of every parameter after `g.backward`; `None` for
    /// parameters bound without gradient tracking.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// True when `name` equals `group` or lies beneath it in the dotted hierarchy.
pub fn in_group(name: &str, group: &str) -> bool {
    group.is_empty()
        || name == group
        || (name.len() > group.len() && name.starts_with(group) && name.as_bytes()[group.len()] == b'.')
}

/// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_membership_respects_path_boundaries() {
        assert!(in_group("teacher.encoder.level0.conv.weight", "teacher.encoder"));
        assert!(in_group("teacher.encoder", "teacher.encoder"));
        assert!(!in_group("teacher.encoder_extra.w", "teacher.encoder"));
        assert!(!in_group("teacher.decoder.proj.weight", "teacher.encoder"));
        assert!(in_group("anything", ""));
    }

    #[test]
    fn digest_changes_with_a_single_bit() {
        let mut store = ParamStore::new();
        let id = store.add("a.w", Tensor::from_vec(vec![1.0, 2.0]));
        store.add("b.w", Tensor::from_vec(vec![3.0]));
        let before = store.digest("a");
        let other = store.digest("b");
        let v = store.get(id).data()[0];
        store.get_mut(id).data_mut()[0] = f64::from_bits(v.to_bits() ^ 1);
        assert_ne!(before, store.digest("a"));
        assert_eq!(other, store.digest("b"));
    }
}
