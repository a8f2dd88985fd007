use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::layers::Linear;
use super::{check_input, HeadWeights, Model};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Binding, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub output_dim: usize,
}

impl BackboneConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self { input_dim, hidden: 32, blocks: 4, output_dim }
    }
}

/// Residual block `h + fc2(tanh(fc1(h)))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Parameter ids of a backbone inside some store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneLayout {
    pub config: BackboneConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub head: Linear,
}

/// Output of [`BackboneLayout::forward`].
pub struct BackboneOutput {
    pub output: NodeId,
    /// One entry per block, in depth order.
    pub taps: Vec<NodeId>,
}

impl BackboneLayout {
    pub fn build(store: &mut ParamStore, config: BackboneConfig, rng: &mut Rng) -> Self {
        let h = config.hidden;
        let input = Linear::new(store, "input", config.input_dim, h, rng);
        let blocks = (1..=config.blocks)
            .map(|i| Block {
                fc1: Linear::new(store, &format!("block{i}.fc1"), h, h, rng),
                fc2: Linear::new(store, &format!("block{i}.fc2"), h, h, rng),
            })
            .collect();
        let head = Linear::new(store, "head", h, config.output_dim, rng);
        Self { config, input, blocks, head }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<BackboneOutput> {
        check_input("backbone", g, x, self.config.input_dim)?;
        let mut h = self.input.forward(g, bind, x)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let z = block.fc1.forward(g, bind, h)?;
            let z = g.tanh(z)?;
            let z = block.fc2.forward(g, bind, z)?;
            h = g.add(h, z)?;
            taps.push(h);
        }
        let output = self.head.forward(g, bind, h)?;
        Ok(BackboneOutput { output, taps })
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        core::iter::once(&self.input).chain(self.blocks.iter().flat_map(|b| [&b.fc1, &b.fc2])).chain(core::iter::once(&self.head))
    }

    fn layer_mut(&mut self, name: &str) -> Option<&mut Linear> {
        if self.input.name == name {
            return Some(&mut self.input);
        }
        if self.head.name == name {
            return Some(&mut self.head);
        }
        self.blocks.iter_mut().flat_map(|b| [&mut b.fc1, &mut b.fc2]).find(|l| l.name == name)
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers().map(|l| l.name.clone()).collect()
    }
}

/// A tappable residual MLP with its own parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layout: BackboneLayout,
    pub store: ParamStore,
    weights: HeadWeights,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let layout = BackboneLayout::build(&mut store, config, rng);
        Self { layout, store, weights: HeadWeights::uniform(1) }
    }

    pub(crate) fn from_parts(layout: BackboneLayout, store: ParamStore) -> Self {
        Self { layout, store, weights: HeadWeights::uniform(1) }
    }

    pub fn config(&self) -> BackboneConfig {
        self.layout.config
    }

    /// Final output and every block output.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<BackboneOutput> {
        self.layout.forward(g, bind, x)
    }

    /// Copy with rank-`rank` adapters on `targets`; base weights frozen,
    /// adapters the only trainable parameters.
    pub fn apply_lora(&self, targets: &[&str], rank: usize, rng: &mut Rng) -> Result<Backbone> {
        let mut out = self.clone();
        out.store.set_all_trainable(false);
        for &target in targets {
            let layer = out.layout.layer_mut(target).ok_or_else(|| Error::UnknownLayer(target.into()))?;
            layer.attach_lora(&mut out.store, rank, rng)?;
        }
        Ok(out)
    }

    /// Default adapter targets: every linear layer inside the blocks.
    pub fn block_layer_names(&self) -> Vec<String> {
        self.layout.blocks.iter().flat_map(|b| [b.fc1.name.clone(), b.fc2.name.clone()]).collect()
    }
}

impl Model for Backbone {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn input_dim(&self) -> usize {
        self.layout.config.input_dim
    }

    fn output_dim(&self) -> usize {
        self.layout.config.output_dim
    }

    fn head_weights(&self) -> &HeadWeights {
        &self.weights
    }

    fn head_outputs(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<Vec<NodeId>> {
        Ok(alloc::vec![self.forward(g, bind, x)?.output])
    }
}
