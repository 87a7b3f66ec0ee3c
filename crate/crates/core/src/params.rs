use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// FNV-1a over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            eat(&t.to_le_bytes());
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Uniform `[-bound, bound]` tensor drawn from `rng`.
pub(crate) fn uniform_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// Whether a bound parameter set receives gradient in a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

/// Lazily registers parameters of a store as graph leaves.
pub struct BoundParams<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    binding: Binding,
    vars: BTreeMap<&'a str, Var>,
}

impl<'a, T: Scalar> BoundParams<'a, T> {
    pub fn new(store: &'a ParamStore<T>, binding: Binding) -> Self {
        Self {
            store,
            binding,
            vars: BTreeMap::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph<'a, T>, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let (key, t) = self
            .store
            .tensors
            .get_key_value(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        let v = match self.binding {
            Binding::Trainable => g.param(key, t),
            Binding::Frozen => g.constant_ref(t),
        };
        self.vars.insert(key.as_str(), v);
        v
    }
}
