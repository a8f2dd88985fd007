//! Backbone, small task model, adapting heads and their composition.
//!
//! Every model owns one [`ParamStore`] and exposes one output node per
//! prediction head. A plain backbone or task network has a single head; a
//! [`LeviComposition`] has one per tap. Predictions aggregate heads by the
//! head-weighted mean.

mod backbone;
mod layers;
mod levi;
mod task;

use alloc::format;
use alloc::vec::Vec;

pub use backbone::{Backbone, BackboneConfig, BackboneLayout, BackboneOutput, Block};
pub use layers::{Linear, Lora};
pub use levi::{AdaptingHead, LeviComposition, LeviConfig, BACKBONE_PREFIX};
pub use task::{EmbeddingSpec, TaskLayout, TaskModelConfig, TaskNet};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Nonnegative per-head weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights(Vec<f64>);

impl HeadWeights {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::HeadWeights("need at least one weight".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::HeadWeights(format!("weight {w} is negative or not finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::HeadWeights(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform head weights need n >= 1");
        Self(alloc::vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub trait Model {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn head_weights(&self) -> &HeadWeights;

    /// Builds the forward pass into `g`; one `[m, output_dim]` node per head.
    fn head_outputs(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<Vec<NodeId>>;

    fn head_predictions(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let bind = self.store().bind(&mut g);
        let xi = g.input(x.clone());
        let outs = self.head_outputs(&mut g, &bind, xi)?;
        Ok(outs.into_iter().map(|o| g.value(o).clone()).collect())
    }

    /// Head-weighted mean of the head predictions.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let preds = self.head_predictions(x)?;
        weighted_mean(&preds, self.head_weights().as_slice())
    }
}

/// `Σ_j weights[j] · preds[j]` elementwise.
///
/// Terms are summed in ascending order of value, so the result does not
/// depend on the order of the (prediction, weight) pairs. A single
/// prediction is returned unchanged.
pub fn weighted_mean(preds: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    let first = preds.first().ok_or(Error::Empty("prediction list"))?;
    if preds.len() != weights.len() {
        return Err(Error::HeadWeights(format!("{} weights for {} predictions", weights.len(), preds.len())));
    }
    if let Some(p) = preds.iter().find(|p| p.shape() != first.shape()) {
        return Err(Error::Shape { op: "aggregate", detail: format!("{:?} vs {:?}", first.shape(), p.shape()) });
    }
    if preds.len() == 1 {
        return Ok(first.clone());
    }
    let mut terms = Vec::with_capacity(preds.len());
    let mut out = Tensor::zeros(first.shape());
    for (i, slot) in out.data_mut().iter_mut().enumerate() {
        terms.clear();
        terms.extend(preds.iter().zip(weights).map(|(p, w)| w * p.data()[i]));
        terms.sort_by(f64::total_cmp);
        *slot = terms.iter().fold(0.0, |acc, t| acc + t);
    }
    Ok(out)
}

/// Plain mean over models' predictions.
pub fn ensemble_mean(preds: &[Tensor]) -> Result<Tensor> {
    let n = preds.len();
    weighted_mean(preds, &alloc::vec![1.0 / n.max(1) as f64; n])
}

pub(crate) fn check_input(what: &'static str, g: &Graph, x: NodeId, dim: usize) -> Result<()> {
    let shape = g.value(x).shape();
    if shape.len() != 2 || shape[1] != dim {
        return Err(Error::Shape { op: what, detail: format!("input {shape:?}, expected [m, {dim}]") });
    }
    Ok(())
}

/// Any model the harness trains.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Net {
    Backbone(Backbone),
    Levi(LeviComposition),
    Task(TaskNet),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Net::Backbone($m) => $e,
            Net::Levi($m) => $e,
            Net::Task($m) => $e,
        }
    };
}

impl Model for Net {
    fn store(&self) -> &ParamStore {
        dispatch!(self, m => m.store())
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        dispatch!(self, m => m.store_mut())
    }

    fn input_dim(&self) -> usize {
        dispatch!(self, m => m.input_dim())
    }

    fn output_dim(&self) -> usize {
        dispatch!(self, m => m.output_dim())
    }

    fn head_weights(&self) -> &HeadWeights {
        dispatch!(self, m => m.head_weights())
    }

    fn head_outputs(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<Vec<NodeId>> {
        dispatch!(self, m => m.head_outputs(g, bind, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedPath;
    use alloc::vec;

    fn rows(rng: &mut crate::rng::Rng, m: usize, d: usize) -> Tensor {
        Tensor::new(&[m, d], (0..m * d).map(|_| crate::rng::normal(rng)).collect()).unwrap()
    }

    #[test]
    fn head_weights_validation() {
        assert!(HeadWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(HeadWeights::new(vec![0.5, 0.6]).is_err());
        assert!(HeadWeights::new(vec![1.5, -0.5]).is_err());
        assert!(HeadWeights::new(vec![]).is_err());
    }

    #[test]
    fn weighted_mean_examples() {
        let t = |v: f64| Tensor::vector(vec![v]);
        assert_eq!(weighted_mean(&[t(1.0), t(3.0)], &[0.5, 0.5]).unwrap().data(), &[2.0]);
        assert_eq!(weighted_mean(&[t(4.0), t(0.0), t(8.0)], &[0.5, 0.25, 0.25]).unwrap().data(), &[4.0]);
        let y0 = 0.123456789;
        assert_eq!(weighted_mean(&[t(y0), t(-7.0)], &[1.0, 0.0]).unwrap().data()[0].to_bits(), y0.to_bits());
    }

    #[test]
    fn zero_depth_backbone_is_head_of_projection() {
        let mut rng = SeedPath::root(0).rng();
        let bb = Backbone::new(BackboneConfig { input_dim: 3, hidden: 4, blocks: 0, output_dim: 2 }, &mut rng);
        let x = rows(&mut rng, 5, 3);
        let mut g = Graph::new();
        let bind = bb.store.bind(&mut g);
        let xi = g.input(x.clone());
        let out = bb.forward(&mut g, &bind, xi).unwrap();
        assert!(out.taps.is_empty());
        let mut g2 = Graph::new();
        let bind2 = bb.store.bind(&mut g2);
        let xi2 = g2.input(x);
        let h = bb.layout.input.forward(&mut g2, &bind2, xi2).unwrap();
        let y = bb.layout.head.forward(&mut g2, &bind2, h).unwrap();
        assert_eq!(g.value(out.output), g2.value(y));
    }

    #[test]
    fn zero_blocks_pass_projection_through() {
        let mut rng = SeedPath::root(1).rng();
        let mut bb = Backbone::new(BackboneConfig::new(3, 1), &mut rng);
        for p in bb.store.iter_mut() {
            if p.name.starts_with("block") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let mut g = Graph::new();
        let bind = bb.store.bind(&mut g);
        let xi = g.input(rows(&mut rng, 4, 3));
        let proj = bb.layout.input.forward(&mut g, &bind, xi).unwrap();
        let out = bb.forward(&mut g, &bind, xi).unwrap();
        assert_eq!(out.taps.len(), 4);
        for t in out.taps {
            assert_eq!(g.value(t), g.value(proj));
        }
    }

    #[test]
    fn input_width_is_checked() {
        let mut rng = SeedPath::root(2).rng();
        let bb = Backbone::new(BackboneConfig::new(3, 1), &mut rng);
        assert!(matches!(bb.predict(&rows(&mut rng, 2, 4)), Err(Error::Shape { .. })));
    }

    #[test]
    fn lora_starts_as_identity_and_counts_rank_params() {
        let mut rng = SeedPath::root(3).rng();
        let bb = Backbone::new(BackboneConfig::new(3, 2), &mut rng);
        let targets = ["block1.fc1", "head"];
        let adapted = bb.apply_lora(&targets, 2, &mut rng).unwrap();
        let x = rows(&mut rng, 6, 3);
        assert_eq!(bb.predict(&x).unwrap(), adapted.predict(&x).unwrap());
        assert_eq!(adapted.store.count(true), 2 * (32 + 32) + 2 * (32 + 2));
        let full = bb.apply_lora(&["block2.fc2"], 32, &mut rng).unwrap();
        assert_eq!(bb.predict(&x).unwrap(), full.predict(&x).unwrap());
    }

    #[test]
    fn lora_rejects_bad_rank_and_layer() {
        let mut rng = SeedPath::root(4).rng();
        let bb = Backbone::new(BackboneConfig::new(3, 2), &mut rng);
        assert!(matches!(bb.apply_lora(&["head"], 3, &mut rng), Err(Error::LoraRank { .. })));
        assert!(matches!(bb.apply_lora(&["head"], 0, &mut rng), Err(Error::LoraRank { .. })));
        assert!(matches!(bb.apply_lora(&["block9.fc1"], 1, &mut rng), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn default_task_model_is_smaller_than_backbone() {
        let mut rng = SeedPath::root(5).rng();
        let bb = Backbone::new(BackboneConfig::new(3, 2), &mut rng);
        let tn = TaskNet::new(TaskModelConfig::new(3), 2, HeadWeights::uniform(1), &mut rng).unwrap();
        let task_only = tn.store.count(false) - tn.heads[0].param_count();
        assert!(task_only < bb.store.count(false));
    }

    #[test]
    fn embeddings_replace_categorical_columns() {
        let mut rng = SeedPath::root(6).rng();
        let mut cfg = TaskModelConfig::new(3);
        cfg.embeddings.push(EmbeddingSpec { column: 1, cardinality: 4, dim: 5 });
        let tn = TaskNet::new(cfg, 1, HeadWeights::uniform(1), &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.5, 3.0, -1.0, 0.1, 0.0, 2.0]).unwrap();
        assert_eq!(tn.predict(&x).unwrap().shape(), &[2, 1]);
        let bad = Tensor::matrix(1, 3, vec![0.5, 4.0, -1.0]).unwrap();
        assert!(tn.predict(&bad).is_err());
    }

    #[test]
    fn levi_rejects_bad_taps() {
        let mut rng = SeedPath::root(7).rng();
        let bb = Backbone::new(BackboneConfig::new(3, 2), &mut rng);
        let mut cfg = LeviConfig::all_blocks(4, Some(TaskModelConfig::new(3)));
        cfg.taps = vec![1, 5];
        cfg.head_weights = HeadWeights::uniform(2);
        assert!(matches!(LeviComposition::new(&bb, cfg.clone(), &mut rng), Err(Error::OutOfRange { .. })));
        cfg.taps = vec![3, 2];
        assert!(LeviComposition::new(&bb, cfg, &mut rng).is_err());
    }

    #[test]
    fn levi_keeps_backbone_values() {
        let mut rng = SeedPath::root(8).rng();
        let bb = Backbone::new(BackboneConfig::new(3, 2), &mut rng);
        let levi = LeviComposition::new(&bb, LeviConfig::all_blocks(4, Some(TaskModelConfig::new(3))), &mut rng).unwrap();
        assert_eq!(levi.backbone_model(), bb);
        assert_eq!(levi.heads[0].in_dim(), 32 + 16);
        let a3 = LeviComposition::new(&bb, LeviConfig::all_blocks(4, None), &mut rng).unwrap();
        assert_eq!(a3.heads[0].in_dim(), 32);
        let x = rows(&mut rng, 3, 3);
        assert_eq!(a3.head_predictions(&x).unwrap().len(), 4);
    }
}
