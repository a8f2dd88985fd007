//! Losses, training loop, parameter masks and ensembling rules.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::data::{shuffle, Split};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{Backbone, BackboneConfig, HeadWeights, Model, Net, BACKBONE_PREFIX};
use crate::optim::{Optimizer, OptimizerKind};
use crate::param::ParamStore;
use crate::rng::SeedPath;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossSpec {
    Mse,
    SoftmaxXent,
}

impl LossSpec {
    /// Mean per-sample loss of `pred` against `labels` (`[m]`).
    pub fn build(self, g: &mut Graph, pred: NodeId, labels: NodeId) -> Result<NodeId> {
        match self {
            LossSpec::SoftmaxXent => g.softmax_xent(pred, labels),
            LossSpec::Mse => {
                let p = g.value(pred).shape().to_vec();
                let target = if g.value(labels).shape() == p.as_slice() {
                    labels
                } else {
                    let t = g.value(labels).clone().reshape(&p).map_err(|_| Error::Shape {
                        op: "mse",
                        detail: format!("labels {:?} vs predictions {p:?}", g.value(labels).shape()),
                    })?;
                    g.input(t)
                };
                g.mse(pred, target)
            }
        }
    }
}

/// `Σ_j weights[j] · L_j` over the heads' mean losses. A single head's loss
/// is returned as is.
pub fn levi_loss(g: &mut Graph, preds: &[NodeId], labels: NodeId, weights: &HeadWeights, loss: LossSpec) -> Result<NodeId> {
    if preds.is_empty() {
        return Err(Error::Empty("head list"));
    }
    if preds.len() != weights.len() {
        return Err(Error::HeadWeights(format!("{} weights for {} heads", weights.len(), preds.len())));
    }
    let first = g.value(preds[0]).shape().to_vec();
    if let Some(&p) = preds.iter().find(|&&p| g.value(p).shape() != first.as_slice()) {
        return Err(Error::Shape { op: "levi_loss", detail: format!("head shapes {first:?} vs {:?}", g.value(p).shape()) });
    }
    if preds.len() == 1 {
        return loss.build(g, preds[0], labels);
    }
    let mut total: Option<NodeId> = None;
    for (&p, &w) in preds.iter().zip(weights.as_slice()) {
        let l = loss.build(g, p, labels)?;
        let term = g.scale(l, w)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one head"))
}

/// Value of [`levi_loss`] on fixed predictions.
pub fn levi_loss_value(preds: &[Tensor], labels: &Tensor, weights: &HeadWeights, loss: LossSpec) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = preds.iter().map(|p| g.input(p.clone())).collect();
    let y = g.input(labels.clone());
    let l = levi_loss(&mut g, &ids, y, weights, loss)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    /// Rows per step; at least the split size means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerKind::Adam, lr: 1e-3, steps: 2000, batch_size: 2000, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trains the model's trainable parameters; returns the loss before each step.
///
/// Minibatches are consecutive chunks of a per-epoch shuffle drawn from the
/// config seed; a trailing partial chunk is dropped.
pub fn train<M: Model + ?Sized>(model: &mut M, data: &Split, cfg: &TrainConfig, loss: LossSpec) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = SeedPath::root(cfg.seed).child("batches").rng();
    let m = data.len();
    let full = cfg.batch_size >= m;
    let mut order: Vec<usize> = (0..m).collect();
    let mut cursor = m;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch;
        let batch_ref = if full {
            data
        } else {
            if cursor + cfg.batch_size > m {
                shuffle(&mut rng, &mut order);
                cursor = 0;
            }
            batch = data.select(&order[cursor..cursor + cfg.batch_size]);
            cursor += cfg.batch_size;
            &batch
        };
        let mut g = Graph::new();
        let bind = model.store().bind(&mut g);
        let x = g.input(batch_ref.features.clone());
        let y = g.input(batch_ref.labels.clone());
        let heads = model.head_outputs(&mut g, &bind, x)?;
        let l = levi_loss(&mut g, &heads, y, model.head_weights(), loss)?;
        let value = g.value(l).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, value });
        }
        trace.push(value);
        let mut grads = g.backward(l)?;
        let per_param: Vec<Option<Tensor>> = bind.nodes().iter().map(|&n| grads.take(n)).collect();
        opt.step(model.store_mut(), &per_param);
    }
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    Levi,
    Ft,
    Ht,
    Lp,
    Fs,
    LpThenFt,
    EnsOutput,
    EnsWeight,
    Lora,
    /// The small task model trained alone (with one or more heads).
    Task,
}

impl Regime {
    pub const ALL: [Regime; 10] = [
        Regime::Levi,
        Regime::Ft,
        Regime::Ht,
        Regime::Lp,
        Regime::Fs,
        Regime::LpThenFt,
        Regime::EnsOutput,
        Regime::EnsWeight,
        Regime::Lora,
        Regime::Task,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Levi => "levi",
            Regime::Ft => "ft",
            Regime::Ht => "ht",
            Regime::Lp => "lp",
            Regime::Fs => "fs",
            Regime::LpThenFt => "lp_then_ft",
            Regime::EnsOutput => "ens_output",
            Regime::EnsWeight => "ens_weight",
            Regime::Lora => "lora",
            Regime::Task => "task",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

/// Which backbone parameters train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    All,
    /// The output-nearest `ceil(B/2)` blocks plus the final head.
    UpperHalf,
    /// Final head only.
    Head,
    /// Low-rank adapter factors only.
    Adapters,
    Frozen,
}

impl Mask {
    pub fn name(self) -> &'static str {
        match self {
            Mask::All => "all",
            Mask::UpperHalf => "upper_half",
            Mask::Head => "head",
            Mask::Adapters => "adapters",
            Mask::Frozen => "frozen",
        }
    }
}

impl FromStr for Mask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mask::All, Mask::UpperHalf, Mask::Head, Mask::Adapters, Mask::Frozen]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask `{s}`")))
    }
}

fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_down") || name.ends_with(".lora_up")
}

/// Sets freeze flags on the backbone parameters under `prefix`.
pub fn mask_backbone(store: &mut ParamStore, prefix: &str, blocks: usize, mask: Mask) -> Result<()> {
    let first_trained = blocks - blocks.div_ceil(2) + 1;
    let has_adapters = store.iter().any(|(_, p)| p.name.starts_with(prefix) && is_adapter(&p.name));
    if mask == Mask::Adapters && !has_adapters {
        return Err(Error::Config("adapter mask on a model without adapters".into()));
    }
    for p in store.iter_mut() {
        let Some(local) = p.name.strip_prefix(prefix) else { continue };
        p.trainable = match mask {
            Mask::All => true,
            Mask::Frozen => false,
            Mask::Adapters => is_adapter(local),
            Mask::Head => local.starts_with("head."),
            Mask::UpperHalf => {
                local.starts_with("head.")
                    || local
                        .strip_prefix("block")
                        .and_then(|r| r.split('.').next())
                        .and_then(|i| i.parse::<usize>().ok())
                        .is_some_and(|i| i >= first_trained)
            }
        };
    }
    Ok(())
}

/// Mask a regime imposes on a backbone.
pub fn regime_mask(regime: Regime) -> Result<Mask> {
    Ok(match regime {
        Regime::Ft | Regime::Fs | Regime::LpThenFt | Regime::EnsWeight => Mask::All,
        Regime::Ht => Mask::UpperHalf,
        Regime::Lp | Regime::EnsOutput => Mask::Head,
        Regime::Lora => Mask::Adapters,
        Regime::Levi => Mask::Frozen,
        Regime::Task => return Err(Error::Config("regime `task` does not apply to a backbone".into())),
    })
}

/// Sets freeze flags for `regime`. A LEVI composition keeps its backbone
/// frozen and trains everything else; a task network trains everything.
/// Re-initialisation for `fs` is done by [`fresh_backbone`].
pub fn set_regime_mask(model: &mut Net, regime: Regime) -> Result<()> {
    match model {
        Net::Backbone(b) => {
            let blocks = b.config().blocks;
            mask_backbone(&mut b.store, "", blocks, regime_mask(regime)?)
        }
        Net::Levi(c) => {
            let blocks = c.backbone.config.blocks;
            c.store.set_all_trainable(true);
            mask_backbone(&mut c.store, BACKBONE_PREFIX, blocks, Mask::Frozen)
        }
        Net::Task(t) => {
            t.store.set_all_trainable(true);
            Ok(())
        }
    }
}

/// The backbone initialisation for `seed`; both pretraining and training
/// from scratch start here.
pub fn fresh_backbone(config: BackboneConfig, seed: u64) -> Backbone {
    Backbone::new(config, &mut SeedPath::root(seed).child("init").child("backbone").rng())
}

/// Linear probing, then training everything. `phase1.seed` and
/// `phase2.seed` drive their own minibatch streams; each phase starts a
/// fresh optimizer.
pub fn lp_then_ft(model: &mut Backbone, data: &Split, phase1: &TrainConfig, phase2: &TrainConfig, loss: LossSpec) -> Result<Vec<f64>> {
    let blocks = model.config().blocks;
    mask_backbone(&mut model.store, "", blocks, Mask::Head)?;
    let mut trace = train(model, data, phase1, loss)?;
    mask_backbone(&mut model.store, "", blocks, Mask::All)?;
    trace.extend(train(model, data, phase2, loss)?);
    Ok(trace)
}

/// Mean of the members' predictions.
pub fn ensemble_output<M: Model>(members: &[M], x: &Tensor) -> Result<Tensor> {
    let preds = members.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?;
    if let Some(p) = preds.iter().find(|p| p.shape() != preds[0].shape()) {
        return Err(Error::Shape { op: "ensemble_output", detail: format!("{:?} vs {:?}", preds[0].shape(), p.shape()) });
    }
    crate::model::ensemble_mean(&preds)
}

/// `alpha · w_ft + (1 − alpha) · w_zero` for every parameter; endpoints are
/// returned exactly.
pub fn ensemble_weight(w_ft: &ParamStore, w_zero: &ParamStore, alpha: f64) -> Result<ParamStore> {
    w_ft.check_same_structure(w_zero)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("interpolation alpha {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(w_ft.clone());
    }
    if alpha == 0.0 {
        return Ok(w_zero.clone());
    }
    let mut out = w_ft.clone();
    for (p, (_, z)) in out.iter_mut().zip(w_zero.iter()) {
        for (a, b) in p.value.data_mut().iter_mut().zip(z.value.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(out)
}

/// Interpolation grid searched on ID validation.
pub const ALPHA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_bundle, SpuriousSpec};
    use crate::model::{LeviComposition, LeviConfig, TaskModelConfig};
    use alloc::vec;

    fn small_bundle() -> crate::data::SpuriousDatasetBundle {
        generate_bundle(&SpuriousSpec { samples: 64, seed: 5, ..SpuriousSpec::default() }).unwrap()
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig { steps, lr: 1e-2, batch_size: 16, ..TrainConfig::default() }
    }

    #[test]
    fn loss_examples() {
        let w = HeadWeights::uniform(2);
        let y = Tensor::vector(vec![0.0]);
        let preds = [Tensor::matrix(1, 1, vec![2f64.sqrt()]).unwrap(), Tensor::matrix(1, 1, vec![2.0]).unwrap()];
        let v = levi_loss_value(&preds, &y, &w, LossSpec::Mse).unwrap();
        assert!((v - 3.0).abs() < 1e-15);
        let w3 = HeadWeights::new(vec![0.5, 0.3, 0.2]).unwrap();
        let p3: Vec<Tensor> = [1.0f64, 2.0, 3.0].iter().map(|l| Tensor::matrix(1, 1, vec![l.sqrt()]).unwrap()).collect();
        assert!((levi_loss_value(&p3, &y, &w3, LossSpec::Mse).unwrap() - 1.7).abs() < 1e-15);
        assert!(levi_loss_value(&p3, &y, &w, LossSpec::Mse).is_err());
    }

    #[test]
    fn zero_steps_is_identity() {
        let b = small_bundle();
        let mut m = fresh_backbone(BackboneConfig::new(3, 2), 1);
        let before = m.clone();
        let trace = train(&mut m, &b.finetune, &quick(0), LossSpec::SoftmaxXent).unwrap();
        assert!(trace.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_replayable_and_decreases_loss() {
        let b = small_bundle();
        let run = || {
            let mut m = fresh_backbone(BackboneConfig::new(3, 2), 2);
            train(&mut m, &b.finetune, &quick(60), LossSpec::SoftmaxXent).unwrap()
        };
        let (t1, t2) = (run(), run());
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 60);
        assert!(t1[59] < t1[0]);
    }

    #[test]
    fn masks_select_expected_parameters() {
        let mut m = Net::Backbone(fresh_backbone(BackboneConfig::new(3, 2), 3));
        set_regime_mask(&mut m, Regime::Lp).unwrap();
        assert_eq!(m.store().count(true), 32 * 2 + 2);
        set_regime_mask(&mut m, Regime::Ht).unwrap();
        let trainable: Vec<_> = m.store().iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.clone()).collect();
        assert!(trainable.iter().all(|n| n.starts_with("block3") || n.starts_with("block4") || n.starts_with("head")));
        assert_eq!(trainable.len(), 2 * 2 * 2 + 2);
        assert!(set_regime_mask(&mut m, Regime::Lora).is_err());
        assert!("nonsense".parse::<Regime>().is_err());
    }

    #[test]
    fn frozen_parameters_survive_training() {
        let b = small_bundle();
        let mut m = Net::Backbone(fresh_backbone(BackboneConfig::new(3, 2), 4));
        set_regime_mask(&mut m, Regime::Lp).unwrap();
        let before = m.store().clone();
        train(&mut m, &b.finetune, &quick(20), LossSpec::SoftmaxXent).unwrap();
        assert_eq!(m.store().changed_names(&before), vec!["head.weight", "head.bias"]);
    }

    #[test]
    fn lp_then_ft_degenerate_phases() {
        let b = small_bundle();
        let base = fresh_backbone(BackboneConfig::new(3, 2), 6);
        let none = quick(0);
        let some = quick(15);
        let mut a = base.clone();
        lp_then_ft(&mut a, &b.finetune, &none, &some, LossSpec::SoftmaxXent).unwrap();
        let mut ft = Net::Backbone(base.clone());
        set_regime_mask(&mut ft, Regime::Ft).unwrap();
        train(&mut ft, &b.finetune, &some, LossSpec::SoftmaxXent).unwrap();
        assert!(a.store.bits_equal_where(ft.store(), |_| true));
        let mut c = base.clone();
        lp_then_ft(&mut c, &b.finetune, &some, &none, LossSpec::SoftmaxXent).unwrap();
        let mut lp = Net::Backbone(base);
        set_regime_mask(&mut lp, Regime::Lp).unwrap();
        train(&mut lp, &b.finetune, &some, LossSpec::SoftmaxXent).unwrap();
        assert!(c.store.bits_equal_where(lp.store(), |_| true));
    }

    #[test]
    fn weight_ensemble_examples() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::vector(vec![1.0, 1.0, 1.0, 1.0, 1.0]), true);
        let mut z = ParamStore::new();
        z.add("w", Tensor::vector(vec![1.0, 1.0, 1.0, 0.0, 0.0]), true);
        let mid = ensemble_weight(&a, &z, 0.5).unwrap();
        assert_eq!(mid.iter().next().unwrap().1.value.data(), &[1.0, 1.0, 1.0, 0.5, 0.5]);
        assert_eq!(ensemble_weight(&a, &z, 1.0).unwrap(), a);
        assert_eq!(ensemble_weight(&a, &z, 0.0).unwrap(), z);
        let mut other = ParamStore::new();
        other.add("v", Tensor::vector(vec![1.0; 5]), true);
        assert!(matches!(ensemble_weight(&a, &other, 0.5), Err(Error::StoreMismatch(_))));
    }

    #[test]
    fn output_ensemble_examples() {
        let bb = fresh_backbone(BackboneConfig::new(3, 2), 7);
        let x = small_bundle().id_test.features;
        assert_eq!(ensemble_output(&[bb.clone(), bb.clone()], &x).unwrap(), bb.predict(&x).unwrap());
        let others = [bb.clone(), fresh_backbone(BackboneConfig::new(3, 2), 8), fresh_backbone(BackboneConfig::new(3, 2), 9)];
        let rev = [others[2].clone(), others[0].clone(), others[1].clone()];
        assert_eq!(ensemble_output(&others, &x).unwrap(), ensemble_output(&rev, &x).unwrap());
    }

    #[test]
    fn levi_training_leaves_backbone_untouched() {
        let b = small_bundle();
        let bb = fresh_backbone(BackboneConfig::new(3, 2), 10);
        let mut rng = SeedPath::root(10).child("levi").rng();
        let levi = LeviComposition::new(&bb, LeviConfig::all_blocks(4, Some(TaskModelConfig::new(3))), &mut rng).unwrap();
        let mut m = Net::Levi(levi);
        set_regime_mask(&mut m, Regime::Levi).unwrap();
        let before = m.store().clone();
        train(&mut m, &b.finetune, &quick(10), LossSpec::SoftmaxXent).unwrap();
        assert!(m.store().bits_equal_where(&before, |n| n.starts_with(BACKBONE_PREFIX)));
        assert!(!m.store().changed_names(&before).is_empty());
    }

    #[test]
    fn muted_head_gets_no_gradient() {
        let b = small_bundle();
        let bb = fresh_backbone(BackboneConfig::new(3, 2), 11);
        let mut rng = SeedPath::root(11).rng();
        let mut cfg = LeviConfig::all_blocks(4, Some(TaskModelConfig::new(3)));
        cfg.taps = vec![2, 4];
        cfg.head_weights = HeadWeights::new(vec![1.0, 0.0]).unwrap();
        let levi = LeviComposition::new(&bb, cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let bind = levi.store.bind(&mut g);
        let x = g.input(b.finetune.features.clone());
        let y = g.input(b.finetune.labels.clone());
        let heads = levi.head_outputs(&mut g, &bind, x).unwrap();
        let l = levi_loss(&mut g, &heads, y, levi.head_weights(), LossSpec::SoftmaxXent).unwrap();
        let grads = g.backward(l).unwrap();
        for (id, p) in levi.store.iter() {
            if p.name.starts_with("heads.1.") {
                assert!(grads.get(bind.node(id)).unwrap().data().iter().all(|v| *v == 0.0), "{}", p.name);
            }
        }
    }
}
