//! Named, ordered parameter storage with freeze flags.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter `{name}`");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    /// Appends a uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` tensor.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) -> ParamId {
        let value = uniform_init(shape, fan_in, rng);
        self.add(name, value, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Sets `trainable` on every parameter whose name satisfies `pred`.
    pub fn set_trainable_where(&mut self, trainable: bool, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    /// Total element count, optionally restricted to trainable parameters.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.params.iter().filter(|p| p.trainable || !trainable_only).map(|p| p.value.numel()).sum()
    }

    pub fn count_frozen(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a graph leaf; frozen ones get no gradient.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding { nodes: self.params.iter().map(|p| g.leaf(p.value.clone(), p.trainable)).collect() }
    }

    /// Names and shapes agree pairwise.
    pub fn check_same_structure(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::StoreMismatch(format!("{} vs {} parameters", self.len(), other.len())));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::StoreMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Appends every parameter of `other` with `prefix` prepended to its name.
    /// Returns the id offset of the first appended parameter.
    pub fn append_prefixed(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let offset = self.params.len();
        for p in &other.params {
            self.params.push(Param { name: format!("{prefix}{}", p.name), value: p.value.clone(), trainable: p.trainable });
        }
        offset
    }

    /// Copies the parameters whose names start with `prefix`, stripping it.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter_map(|p| {
                p.name.strip_prefix(prefix).map(|rest| Param { name: rest.into(), value: p.value.clone(), trainable: p.trainable })
            })
            .collect();
        ParamStore { params }
    }

    /// Bit-level equality of the values whose names satisfy `pred`.
    pub fn bits_equal_where(&self, other: &ParamStore, pred: impl Fn(&str) -> bool) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).filter(|(a, _)| pred(&a.name)).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Names of parameters whose values differ bit-wise from `other`.
    pub fn changed_names(&self, other: &ParamStore) -> Vec<String> {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, b)| a.value.data().iter().zip(b.value.data()).any(|(x, y)| x.to_bits() != y.to_bits()))
            .map(|(a, _)| a.name.clone())
            .collect()
    }
}

pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng::uniform(rng, -bound, bound)).collect();
    Tensor::new(shape, data).expect("shape matches element count")
}

/// Graph leaves for one forward pass over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedPath;

    #[test]
    fn counts_split_into_trainable_and_frozen() {
        let mut s = ParamStore::new();
        let mut rng = SeedPath::root(0).rng();
        s.add_uniform("a", &[3, 2], 3, &mut rng);
        let b = s.add_uniform("b", &[2], 3, &mut rng);
        s.get_mut(b).trainable = false;
        assert_eq!(s.count(false), 8);
        assert_eq!(s.count(true), 6);
        assert_eq!(s.count(true) + s.count_frozen(), s.count(false));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = SeedPath::root(1).rng();
        let t = uniform_init(&[16, 16], 16, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn prefix_round_trip() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0), true);
        let mut outer = ParamStore::new();
        outer.append_prefixed(&s, "bb.");
        outer.add("x", Tensor::scalar(2.0), true);
        assert_eq!(outer.extract_prefixed("bb."), s);
    }
}
