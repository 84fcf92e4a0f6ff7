use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::graph::{Graph, Var};
use crate::{Scalar, Tensor};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<F> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    /// Panics when the name is unknown; models only bind names they registered.
    pub fn expect(&self, name: &str) -> &Tensor<F> {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn bind(&self, g: &mut Graph<F>, name: &str) -> Var {
        g.param(name, self.expect(name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
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

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Moves every tensor of `other` into `self`, overwriting duplicates.
    pub fn extend(&mut self, other: ParamStore<F>) {
        self.tensors.extend(other.tensors);
    }

    /// Tensors whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<F> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        self.checksum_prefix("")
    }

    pub fn checksum_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
