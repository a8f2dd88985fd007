use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Low-rank update of a [`Linear`] weight.
///
/// Weights are stored input-major (`[in, out]`, `y = x·W + b`), so the
/// adapter factors are `down: [in, r]` and `up: [r, out]` and the effective
/// weight is `W + down·up`. `up` starts at zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lora {
    pub rank: usize,
    pub down: ParamId,
    pub up: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub lora: Option<Lora>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng);
        Self { name: name.into(), in_dim, out_dim, weight, bias, lora: None }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId> {
        let mut y = g.matmul(x, bind.node(self.weight))?;
        if let Some(lora) = &self.lora {
            let low = g.matmul(x, bind.node(lora.down))?;
            let delta = g.matmul(low, bind.node(lora.up))?;
            y = g.add(y, delta)?;
        }
        g.add(y, bind.node(self.bias))
    }

    /// Attaches a zero-initialised adapter of rank `rank`.
    pub fn attach_lora(&mut self, store: &mut ParamStore, rank: usize, rng: &mut Rng) -> Result<()> {
        if rank == 0 || rank > self.in_dim.min(self.out_dim) {
            return Err(Error::LoraRank { layer: self.name.clone(), rank, inp: self.in_dim, out: self.out_dim });
        }
        if self.lora.is_some() {
            return Err(Error::Config(format!("layer `{}` already has an adapter", self.name)));
        }
        let down = store.add_uniform(format!("{}.lora_down", self.name), &[self.in_dim, rank], self.in_dim, rng);
        let up = store.add(format!("{}.lora_up", self.name), Tensor::zeros(&[rank, self.out_dim]), true);
        self.lora = Some(Lora { rank, down, up });
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let base = self.in_dim * self.out_dim + self.out_dim;
        base + self.lora.as_ref().map_or(0, |l| l.rank * (self.in_dim + self.out_dim))
    }
}
