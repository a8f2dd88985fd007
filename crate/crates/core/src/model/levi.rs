use alloc::format;
use alloc::vec::Vec;

use super::backbone::{Backbone, BackboneLayout};
use super::layers::Linear;
use super::task::{TaskLayout, TaskModelConfig};
use super::{HeadWeights, Model};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Binding, ParamStore};
use crate::rng::Rng;

/// Prefix of backbone parameter names inside a composition's store.
pub const BACKBONE_PREFIX: &str = "backbone.";

/// One tanh hidden layer, then a linear map to the label dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdaptingHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl AdaptingHead {
    pub fn build(store: &mut ParamStore, prefix: &str, in_dim: usize, width: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let hidden = Linear::new(store, &format!("{prefix}hidden"), in_dim, width, rng);
        let output = Linear::new(store, &format!("{prefix}out"), width, out_dim, rng);
        Self { hidden, output }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, bind, x)?;
        let h = g.tanh(h)?;
        self.output.forward(g, bind, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeviConfig {
    /// 1-based block indices, strictly increasing.
    pub taps: Vec<usize>,
    /// `None` feeds each head its tap alone.
    pub task: Option<TaskModelConfig>,
    pub head_width: usize,
    pub head_weights: HeadWeights,
}

impl LeviConfig {
    /// Every block tapped, uniform weights.
    pub fn all_blocks(blocks: usize, task: Option<TaskModelConfig>) -> Self {
        Self { taps: (1..=blocks).collect(), task, head_width: 64, head_weights: HeadWeights::uniform(blocks.max(1)) }
    }

    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("at least one tap is required".into()));
        }
        for (i, &t) in self.taps.iter().enumerate() {
            if t == 0 || t > blocks {
                return Err(Error::OutOfRange { what: "tap (blocks are 1-based)", index: t, len: blocks });
            }
            if i > 0 && self.taps[i - 1] >= t {
                return Err(Error::Config("taps must be strictly increasing".into()));
            }
        }
        if self.head_weights.len() != self.taps.len() {
            return Err(Error::HeadWeights(format!("{} weights for {} taps", self.head_weights.len(), self.taps.len())));
        }
        if self.head_width == 0 {
            return Err(Error::Config("head width must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone taps and a small task model feeding one adapting head per tap.
#[derive(Clone, Debug, PartialEq)]
pub struct LeviComposition {
    pub backbone: BackboneLayout,
    pub taps: Vec<usize>,
    pub task: Option<TaskLayout>,
    pub heads: Vec<AdaptingHead>,
    pub store: ParamStore,
    weights: HeadWeights,
}

impl LeviComposition {
    /// Takes over `backbone`'s parameters (renamed under [`BACKBONE_PREFIX`],
    /// freeze flags kept) and adds fresh task-model and head parameters.
    pub fn new(backbone: &Backbone, config: LeviConfig, rng: &mut Rng) -> Result<Self> {
        config.validate(backbone.config().blocks)?;
        let mut store = ParamStore::new();
        store.append_prefixed(&backbone.store, BACKBONE_PREFIX);
        let task = match config.task {
            Some(tc) => Some(TaskLayout::build(&mut store, "task.", tc, rng)?),
            None => None,
        };
        let bc = backbone.config();
        let in_dim = bc.hidden + task.as_ref().map_or(0, |t| t.config.output_dim);
        let heads = (0..config.taps.len())
            .map(|j| AdaptingHead::build(&mut store, &format!("heads.{j}."), in_dim, config.head_width, bc.output_dim, rng))
            .collect();
        Ok(Self { backbone: backbone.layout.clone(), taps: config.taps, task, heads, store, weights: config.head_weights })
    }

    /// The backbone part as a standalone model.
    pub fn backbone_model(&self) -> Backbone {
        Backbone::from_parts(self.backbone.clone(), self.store.extract_prefixed(BACKBONE_PREFIX))
    }

    pub fn set_head_weights(&mut self, weights: HeadWeights) -> Result<()> {
        if weights.len() != self.heads.len() {
            return Err(Error::HeadWeights(format!("{} weights for {} heads", weights.len(), self.heads.len())));
        }
        self.weights = weights;
        Ok(())
    }

    /// Inputs to each head: `concat(tap, task_out)`, or the tap alone without a task model.
    pub fn head_inputs(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<Vec<NodeId>> {
        let bb = self.backbone.forward(g, bind, x)?;
        let task_out = match &self.task {
            Some(t) => Some(t.forward(g, bind, x)?),
            None => None,
        };
        self.taps
            .iter()
            .map(|&t| {
                let tap = *bb.taps.get(t.wrapping_sub(1)).ok_or(Error::OutOfRange { what: "tap", index: t, len: bb.taps.len() })?;
                match task_out {
                    Some(e) => g.concat(&[tap, e], 1),
                    None => Ok(tap),
                }
            })
            .collect()
    }
}

impl Model for LeviComposition {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn input_dim(&self) -> usize {
        self.backbone.config.input_dim
    }

    fn output_dim(&self) -> usize {
        self.backbone.config.output_dim
    }

    fn head_weights(&self) -> &HeadWeights {
        &self.weights
    }

    fn head_outputs(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<Vec<NodeId>> {
        let inputs = self.head_inputs(g, bind, x)?;
        self.heads.iter().zip(inputs).map(|(h, i)| h.forward(g, bind, i)).collect()
    }
}
