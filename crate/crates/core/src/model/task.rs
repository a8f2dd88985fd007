use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::layers::Linear;
use super::{check_input, HeadWeights, Model};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Binding, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Input column holding category indices, replaced by a learned embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingSpec {
    pub column: usize,
    pub cardinality: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the relu trunk.
    pub widths: Vec<usize>,
    pub output_dim: usize,
    pub embeddings: Vec<EmbeddingSpec>,
}

impl TaskModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, widths: vec![32], output_dim: 16, embeddings: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.widths.contains(&0) {
            return Err(Error::Config("task model dimensions must be positive".into()));
        }
        let mut seen = Vec::new();
        for e in &self.embeddings {
            if e.column >= self.input_dim || e.cardinality == 0 || e.dim == 0 || seen.contains(&e.column) {
                return Err(Error::Config(format!("bad embedding on column {}", e.column)));
            }
            seen.push(e.column);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskLayout {
    pub config: TaskModelConfig,
    pub tables: Vec<ParamId>,
    pub trunk: Vec<Linear>,
    pub output: Linear,
}

impl TaskLayout {
    pub fn build(store: &mut ParamStore, prefix: &str, config: TaskModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut tables = Vec::new();
        for e in &config.embeddings {
            tables.push(store.add_uniform(format!("{prefix}embed{}", e.column), &[e.cardinality, e.dim], e.dim, rng));
        }
        let dense = config.input_dim - config.embeddings.len();
        let mut width = dense + config.embeddings.iter().map(|e| e.dim).sum::<usize>();
        let mut trunk = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            trunk.push(Linear::new(store, &format!("{prefix}fc{}", i + 1), width, w, rng));
            width = w;
        }
        let output = Linear::new(store, &format!("{prefix}out"), width, config.output_dim, rng);
        Ok(Self { config, tables, trunk, output })
    }

    /// Feature vector of width `output_dim` per row.
    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId> {
        check_input("task model", g, x, self.config.input_dim)?;
        let mut h = if self.config.embeddings.is_empty() {
            x
        } else {
            let value = g.value(x).clone();
            let mut parts = Vec::new();
            let dense_cols: Vec<usize> =
                (0..self.config.input_dim).filter(|c| !self.config.embeddings.iter().any(|e| e.column == *c)).collect();
            if !dense_cols.is_empty() {
                parts.push(g.input(select_columns(&value, &dense_cols)));
            }
            for (spec, &table) in self.config.embeddings.iter().zip(&self.tables) {
                let idx = g.input(select_columns(&value, &[spec.column]).reshape(&[value.rows()])?);
                parts.push(g.embed_lookup(bind.node(table), idx)?);
            }
            g.concat(&parts, 1)?
        };
        for layer in &self.trunk {
            let z = layer.forward(g, bind, h)?;
            h = g.relu(z)?;
        }
        self.output.forward(g, bind, h)
    }
}

fn select_columns(t: &Tensor, cols: &[usize]) -> Tensor {
    let rows = t.rows();
    let mut data = Vec::with_capacity(rows * cols.len());
    for r in 0..rows {
        let row = t.row(r);
        data.extend(cols.iter().map(|&c| row[c]));
    }
    Tensor::new(&[rows, cols.len()], data).expect("non-empty selection")
}

/// The small task model alone, with one or more linear output heads.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskNet {
    pub task: TaskLayout,
    pub heads: Vec<Linear>,
    pub store: ParamStore,
    weights: HeadWeights,
}

impl TaskNet {
    pub fn new(config: TaskModelConfig, out_dim: usize, weights: HeadWeights, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let task = TaskLayout::build(&mut store, "task.", config, rng)?;
        let e = task.config.output_dim;
        let heads = (0..weights.len()).map(|j| Linear::new(&mut store, &format!("heads.{j}"), e, out_dim, rng)).collect();
        Ok(Self { task, heads, store, weights })
    }
}

impl Model for TaskNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn input_dim(&self) -> usize {
        self.task.config.input_dim
    }

    fn output_dim(&self) -> usize {
        self.heads[0].out_dim
    }

    fn head_weights(&self) -> &HeadWeights {
        &self.weights
    }

    fn head_outputs(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<Vec<NodeId>> {
        let feats = self.task.forward(g, bind, x)?;
        self.heads.iter().map(|h| h.forward(g, bind, feats)).collect()
    }
}
