//! Named learnable tensors and per-graph parameter binding.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MavrError, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Stable index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// All learnable weights, addressable by stable dotted names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total scalar count over every parameter.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Count restricted to names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| MavrError::Config(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(MavrError::shape(
                "ParamStore::set",
                name.to_string(),
                format!("{:?} vs {:?}", self.tensors[id.0].shape(), value.shape()),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Fan-in scaled uniform weights, bound `sqrt(1 / fan_in)`.
pub fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

/// Binds parameters to leaves of one graph on first use.
pub struct Binder<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    params: &'a ParamStore<T>,
    bound: HashMap<ParamId, Var>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a ParamStore<T>) -> Self {
        Self {
            graph,
            params,
            bound: HashMap::new(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.graph.param(id.0, self.params.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_respects_bound_and_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let ta: Tensor<f32> = fan_in_uniform(&[8, 25], 25, &mut a);
        let tb: Tensor<f32> = fan_in_uniform(&[8, 25], 25, &mut b);
        assert_eq!(ta, tb);
        assert!(ta.data().iter().all(|v| v.abs() <= 0.2));
    }

    #[test]
    fn names_are_stable_and_unique() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("enc.stem.w", Tensor::zeros(&[2]));
        let b = s.add("enc.stem.b", Tensor::zeros(&[3]));
        assert_eq!(s.id("enc.stem.b"), Some(b));
        assert_eq!(s.name(a), "enc.stem.w");
        assert_eq!(s.count(), 5);
        assert!(s.set("enc.stem.w", Tensor::zeros(&[3])).is_err());
    }
}
