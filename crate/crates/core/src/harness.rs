//! Metrics, parameter and FLOP accounting, and multi-seed orchestration.
//!
//! FLOP rules, per forward-pass node (loss nodes are not part of a forward
//! pass and head aggregation is not counted):
//!
//! | op                     | FLOPs                         |
//! |------------------------|-------------------------------|
//! | matmul `[a,b]·[b,c]`   | `2abc`                        |
//! | add, mul               | output elements               |
//! | relu, tanh             | elements                      |
//! | mean, sum              | input elements                |
//! | concat, embed_lookup   | 0                             |
//! | softmax_xent, mse      | 0                             |

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::data::{generate_bundle, generate_split, LabelKind, Split, SplitKind, SpuriousDatasetBundle, SpuriousSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind};
use crate::model::{
    ensemble_mean, Backbone, BackboneConfig, EmbeddingSpec, HeadWeights, LeviComposition, LeviConfig, Model, Net,
    TaskModelConfig, TaskNet, BACKBONE_PREFIX,
};
use crate::regime::{
    ensemble_weight, fresh_backbone, lp_then_ft, mask_backbone, regime_mask, set_regime_mask, train, LossSpec, Mask,
    Regime, TrainConfig, ALPHA_GRID,
};
use crate::rng::SeedPath;
use crate::tensor::Tensor;

// ---- metrics ----

/// `sqrt(Σ (y − ŷ)² / m)`.
pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let ss: f64 = preds.iter().zip(labels).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok(libm::sqrt(ss / preds.len() as f64))
}

/// Mean absolute error.
pub fn l1(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (y - p).abs()).sum::<f64>() / preds.len() as f64)
}

fn check_pair(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    if preds.len() != labels.len() {
        return Err(Error::Shape { op: "metric", detail: format!("{} predictions, {} labels", preds.len(), labels.len()) });
    }
    Ok(())
}

/// Percentage of rows whose predicted class equals the label. Rank-2
/// predictions are argmaxed per row; anything else is compared directly.
pub fn accuracy(preds: &Tensor, labels: &[f64]) -> Result<f64> {
    let classes: Vec<f64> = if preds.ndim() == 2 && preds.cols() > 1 {
        preds.argmax_rows().into_iter().map(|c| c as f64).collect()
    } else {
        preds.data().to_vec()
    };
    check_pair(&classes, labels)?;
    let correct = classes.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Rmse,
    Accuracy,
    L1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Accuracy => "accuracy",
            Metric::L1 => "l1",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Metric::Accuracy
    }

    pub fn evaluate(self, preds: &Tensor, split: &Split) -> Result<f64> {
        let labels = split.labels.data();
        match self {
            Metric::Accuracy => accuracy(preds, labels),
            Metric::Rmse => rmse(preds.data(), labels),
            Metric::L1 => l1(preds.data(), labels),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Metric::Rmse, Metric::Accuracy, Metric::L1]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvalSplit {
    Id,
    Ood,
}

impl EvalSplit {
    pub const BOTH: [EvalSplit; 2] = [EvalSplit::Id, EvalSplit::Ood];

    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Id => "id",
            EvalSplit::Ood => "ood",
        }
    }
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(EvalSplit::Id),
            "ood" => Ok(EvalSplit::Ood),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub experiment_id: String,
    pub regime: String,
    pub seed: u64,
    pub split: EvalSplit,
    pub metric: Metric,
    pub value: f64,
}

// ---- accounting ----

pub fn count_params<M: Model + ?Sized>(model: &M, trainable_only: bool) -> usize {
    model.store().count(trainable_only)
}

/// FLOPs of the nodes of `g` from index `from` on.
pub fn graph_flops(g: &Graph, from: usize) -> u64 {
    let mut total = 0u64;
    for id in g.node_ids().skip(from) {
        let Some(kind) = g.kind(id) else { continue };
        let out = g.value(id).numel() as u64;
        total += match kind {
            OpKind::Matmul => {
                let inputs = g.inputs_of(id);
                let (a, b) = (g.value(inputs[0]).shape(), g.value(inputs[1]).shape());
                2 * (a[0] * a[1] * b[1]) as u64
            }
            OpKind::Add | OpKind::Mul | OpKind::Relu | OpKind::Tanh => out,
            OpKind::Mean | OpKind::Sum => g.value(g.inputs_of(id)[0]).numel() as u64,
            OpKind::Concat | OpKind::EmbedLookup | OpKind::SoftmaxXent | OpKind::Mse => 0,
        };
    }
    total
}

/// FLOPs of one forward pass over `rows` inputs (all-zero features).
pub fn count_flops<M: Model + ?Sized>(model: &M, rows: usize) -> Result<u64> {
    let mut g = Graph::new();
    let bind = model.store().bind(&mut g);
    let x = g.input(Tensor::zeros(&[rows.max(1), model.input_dim()]));
    let start = g.len();
    model.head_outputs(&mut g, &bind, x)?;
    Ok(graph_flops(&g, start))
}

/// FLOPs of a composition's parts, each measured on its own graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub backbone: u64,
    pub task: u64,
    pub heads: Vec<u64>,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.backbone + self.task + self.heads.iter().sum::<u64>()
    }
}

pub fn levi_flop_breakdown(c: &LeviComposition, rows: usize) -> Result<FlopBreakdown> {
    let rows = rows.max(1);
    let backbone = count_flops(&c.backbone_model(), rows)?;
    let mut g = Graph::new();
    let bind = c.store.bind(&mut g);
    let x = g.input(Tensor::zeros(&[rows, c.input_dim()]));
    let task = match &c.task {
        Some(t) => {
            let start = g.len();
            t.forward(&mut g, &bind, x)?;
            graph_flops(&g, start)
        }
        None => 0,
    };
    let mut heads = Vec::new();
    for h in &c.heads {
        let hx = g.input(Tensor::zeros(&[rows, h.in_dim()]));
        let start = g.len();
        h.forward(&mut g, &bind, hx)?;
        heads.push(graph_flops(&g, start));
    }
    Ok(FlopBreakdown { backbone, task, heads })
}

// ---- configuration ----

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub hidden: usize,
    pub blocks: usize,
    pub task_widths: Vec<usize>,
    pub task_out: usize,
    pub embeddings: Vec<EmbeddingSpec>,
    pub head_width: usize,
    /// Defaults to every block.
    pub taps: Option<Vec<usize>>,
    /// Defaults to uniform.
    pub head_weights: Option<Vec<f64>>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: 32,
            blocks: 4,
            task_widths: alloc::vec![32],
            task_out: 16,
            embeddings: Vec::new(),
            head_width: 64,
            taps: None,
            head_weights: None,
        }
    }
}

impl ModelSpec {
    pub fn backbone_config(&self, data: &SpuriousSpec) -> BackboneConfig {
        BackboneConfig { input_dim: data.dim(), hidden: self.hidden, blocks: self.blocks, output_dim: data.output_dim() }
    }

    pub fn task_config(&self, data: &SpuriousSpec) -> TaskModelConfig {
        TaskModelConfig {
            input_dim: data.dim(),
            widths: self.task_widths.clone(),
            output_dim: self.task_out,
            embeddings: self.embeddings.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeSpec {
    /// Label used in reports; unique within an experiment.
    pub name: String,
    pub regime: Regime,
    /// The seed field is ignored; run seeds are derived.
    pub train: TrainConfig,
    /// Second phase of `lp_then_ft`.
    pub phase2: Option<TrainConfig>,
    /// Members of `ens_output`: `ft`, `fs`, `lp`, `ht`, `zero_shot`, `task`,
    /// `levi`, optionally suffixed `#k` to use an independent replica.
    pub members: Vec<String>,
    /// Fixed interpolation weight for `ens_weight`; chosen on ID validation when absent.
    pub alpha: Option<f64>,
    pub lora_rank: usize,
    /// Defaults to every block layer.
    pub lora_targets: Vec<String>,
    /// Whether LEVI heads also see the task model.
    pub levi_task: bool,
    pub levi_backbone_mask: Mask,
    /// Overrides the model-level taps.
    pub taps: Option<Vec<usize>>,
    pub head_weights: Option<Vec<f64>>,
    /// Output heads of a `task` network.
    pub task_heads: usize,
}

impl RegimeSpec {
    pub fn new(name: &str, regime: Regime) -> Self {
        Self {
            name: name.into(),
            regime,
            train: TrainConfig::default(),
            phase2: None,
            members: Vec::new(),
            alpha: None,
            lora_rank: 4,
            lora_targets: Vec::new(),
            levi_task: true,
            levi_backbone_mask: Mask::Frozen,
            taps: None,
            head_weights: None,
            task_heads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub data: SpuriousSpec,
    pub model: ModelSpec,
    /// Pretraining of the backbone on the pretrain split.
    pub pretrain: TrainConfig,
    pub regimes: Vec<RegimeSpec>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<Metric>,
}

fn parse_member(m: &str) -> Result<(&str, u64)> {
    let (kind, replica) = match m.split_once('#') {
        Some((k, r)) => (k, r.parse::<u64>().map_err(|_| Error::Config(format!("bad member replica in `{m}`")))?),
        None => (m, 0),
    };
    if !matches!(kind, "ft" | "fs" | "lp" | "ht" | "zero_shot" | "task" | "levi") {
        return Err(Error::Config(format!("unknown ensemble member `{m}`")));
    }
    Ok((kind, replica))
}

impl ExperimentConfig {
    pub fn loss(&self) -> LossSpec {
        match self.data.label {
            LabelKind::Binary => LossSpec::SoftmaxXent,
            LabelKind::Regression => LossSpec::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let m = &self.model;
        if m.hidden == 0 || m.task_out == 0 || m.head_width == 0 || m.task_widths.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        self.model.task_config(&self.data).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config("at least one regime is required".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::Config("at least one metric is required".into()));
        }
        for metric in &self.metrics {
            let ok = match self.data.label {
                LabelKind::Binary => *metric == Metric::Accuracy,
                LabelKind::Regression => *metric != Metric::Accuracy,
            };
            if !ok {
                return Err(Error::Config(format!("metric `{metric}` does not fit {:?} labels", self.data.label)));
            }
        }
        self.pretrain.validate()?;
        let mut names = Vec::new();
        for r in &self.regimes {
            if names.contains(&r.name.as_str()) {
                return Err(Error::Config(format!("duplicate regime name `{}`", r.name)));
            }
            names.push(&r.name);
            r.train.validate()?;
            if let Some(p) = &r.phase2 {
                p.validate()?;
            }
            if r.regime == Regime::LpThenFt && r.phase2.is_none() {
                return Err(Error::Config(format!("regime `{}` needs a second phase", r.name)));
            }
            if r.regime == Regime::EnsOutput {
                if r.members.is_empty() {
                    return Err(Error::Config(format!("regime `{}` needs members", r.name)));
                }
                for m in &r.members {
                    parse_member(m)?;
                }
            }
            if let Some(a) = r.alpha {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
                }
            }
            if r.task_heads == 0 {
                return Err(Error::Config("task networks need at least one head".into()));
            }
            if r.regime == Regime::Levi {
                self.levi_config(r)?.validate(m.blocks)?;
            }
        }
        Ok(())
    }

    fn levi_config(&self, r: &RegimeSpec) -> Result<LeviConfig> {
        let taps = r.taps.clone().or_else(|| self.model.taps.clone()).unwrap_or_else(|| (1..=self.model.blocks).collect());
        let weights = match r.head_weights.clone().or_else(|| self.model.head_weights.clone()) {
            Some(w) => HeadWeights::new(w)?,
            None => HeadWeights::uniform(taps.len().max(1)),
        };
        Ok(LeviConfig {
            taps,
            task: r.levi_task.then(|| self.model.task_config(&self.data)),
            head_width: self.model.head_width,
            head_weights: weights,
        })
    }

    /// Backbone replicas any regime needs; replica 0 always.
    fn replicas(&self) -> Vec<u64> {
        let mut out = alloc::vec![0];
        for r in &self.regimes {
            for m in &r.members {
                if let Ok((_, k)) = parse_member(m) {
                    if !out.contains(&k) {
                        out.push(k);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

// ---- orchestration ----

/// Data shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub bundle: SpuriousDatasetBundle,
    pub validation: Split,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    Ok(Prepared { bundle: generate_bundle(&cfg.data)?, validation: generate_split(&cfg.data, SplitKind::IdValidation)? })
}

/// Pretrained backbones of one seed, by replica.
#[derive(Clone, Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub pretrained: BTreeMap<u64, Backbone>,
}

impl SeedContext {
    fn backbone(&self, replica: u64) -> &Backbone {
        &self.pretrained[&replica]
    }
}

fn replica_path(seed: u64, replica: u64) -> SeedPath {
    if replica == 0 {
        SeedPath::root(seed)
    } else {
        SeedPath::root(seed).child("replica").index(replica)
    }
}

fn replica_seed(seed: u64, replica: u64) -> u64 {
    replica_path(seed, replica).value()
}

/// Pretrains one backbone per replica on the pretrain split.
pub fn prepare_seed(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<SeedContext> {
    let bc = cfg.model.backbone_config(&cfg.data);
    let mut pretrained = BTreeMap::new();
    for replica in cfg.replicas() {
        let init_seed = replica_seed(seed, replica);
        let mut bb = fresh_backbone(bc, init_seed);
        let tc = TrainConfig { seed: replica_path(seed, replica).child("pretrain").value(), ..cfg.pretrain.clone() };
        train(&mut bb, &prepared.bundle.pretrain, &tc, cfg.loss())
            .map_err(|e| Error::Run { regime: "pretrain".into(), seed, source: alloc::boxed::Box::new(e) })?;
        pretrained.insert(replica, bb);
    }
    Ok(SeedContext { seed, pretrained })
}

/// A trained regime: one model, or several whose predictions are averaged.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Predictor {
    Single(Net),
    Ensemble(Vec<Net>),
}

impl Predictor {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Predictor::Single(m) => m.predict(x),
            Predictor::Ensemble(ms) => {
                let preds = ms.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?;
                ensemble_mean(&preds)
            }
        }
    }

    pub fn members(&self) -> &[Net] {
        match self {
            Predictor::Single(m) => core::slice::from_ref(m),
            Predictor::Ensemble(ms) => ms,
        }
    }
}


/// Trains a single model of kind `kind` for `spec`.
fn train_member(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    ctx: &SeedContext,
    spec: &RegimeSpec,
    kind: &str,
    replica: u64,
) -> Result<Net> {
    let data = &prepared.bundle.finetune;
    let loss = cfg.loss();
    // every regime of a seed sees the same minibatch stream
    let path = replica_path(ctx.seed, replica);
    let tc = TrainConfig { seed: path.child("finetune").value(), ..spec.train.clone() };
    let init = path.child("init").child(kind);
    let pretrained = ctx.backbone(replica);
    let mut net = match kind {
        "ft" => Net::Backbone(pretrained.clone()),
        "ht" | "lp" | "zero_shot" => Net::Backbone(pretrained.clone()),
        "fs" => Net::Backbone(fresh_backbone(cfg.model.backbone_config(&cfg.data), replica_seed(ctx.seed, replica))),
        "task" => {
            let mut rng = init.rng();
            let weights = HeadWeights::uniform(spec.task_heads);
            Net::Task(TaskNet::new(cfg.model.task_config(&cfg.data), cfg.data.output_dim(), weights, &mut rng)?)
        }
        "levi" => {
            let mut rng = init.rng();
            let mut levi = LeviComposition::new(pretrained, cfg.levi_config(spec)?, &mut rng)?;
            let blocks = levi.backbone.config.blocks;
            levi.store.set_all_trainable(true);
            mask_backbone(&mut levi.store, BACKBONE_PREFIX, blocks, spec.levi_backbone_mask)?;
            let mut net = Net::Levi(levi);
            train(&mut net, data, &tc, loss)?;
            return Ok(net);
        }
        "lora" => {
            let targets: Vec<String> =
                if spec.lora_targets.is_empty() { pretrained.block_layer_names() } else { spec.lora_targets.clone() };
            let refs: Vec<&str> = targets.iter().map(String::as_str).collect();
            let mut rng = init.rng();
            Net::Backbone(pretrained.apply_lora(&refs, spec.lora_rank, &mut rng)?)
        }
        "lp_then_ft" => {
            let mut bb = pretrained.clone();
            let p2 = spec.phase2.clone().ok_or_else(|| Error::Config("missing second phase".into()))?;
            let p2 = TrainConfig { seed: path.child("finetune").child("phase2").value(), ..p2 };
            lp_then_ft(&mut bb, data, &tc, &p2, loss)?;
            return Ok(Net::Backbone(bb));
        }
        other => return Err(Error::Config(format!("unknown model kind `{other}`"))),
    };
    if kind == "zero_shot" {
        return Ok(net);
    }
    if let Net::Backbone(b) = &mut net {
        let regime: Regime = match kind {
            "fs" => Regime::Fs,
            "lora" => Regime::Lora,
            other => other.parse()?,
        };
        let blocks = b.config().blocks;
        mask_backbone(&mut b.store, "", blocks, regime_mask(regime)?)?;
    } else {
        set_regime_mask(&mut net, Regime::Task)?;
    }
    train(&mut net, data, &tc, loss)?;
    Ok(net)
}

/// Trains one regime for one seed.
pub fn run_regime(cfg: &ExperimentConfig, prepared: &Prepared, ctx: &SeedContext, spec: &RegimeSpec) -> Result<Predictor> {
    let wrap = |e: Error| Error::Run { regime: spec.name.clone(), seed: ctx.seed, source: alloc::boxed::Box::new(e) };
    let single = |kind: &str| train_member(cfg, prepared, ctx, spec, kind, 0).map(Predictor::Single);
    let out = match spec.regime {
        Regime::Ft => single("ft"),
        Regime::Ht => single("ht"),
        Regime::Lp => single("lp"),
        Regime::Fs => single("fs"),
        Regime::Levi => single("levi"),
        Regime::Lora => single("lora"),
        Regime::Task => single("task"),
        Regime::LpThenFt => single("lp_then_ft"),
        Regime::EnsOutput => (|| {
            let mut members = Vec::new();
            for m in &spec.members {
                let (kind, replica) = parse_member(m)?;
                members.push(train_member(cfg, prepared, ctx, spec, kind, replica)?);
            }
            Ok(Predictor::Ensemble(members))
        })(),
        Regime::EnsWeight => (|| {
            let ft = match train_member(cfg, prepared, ctx, spec, "ft", 0)? {
                Net::Backbone(b) => b,
                _ => unreachable!("ft trains a backbone"),
            };
            let zero = ctx.backbone(0);
            let alphas: Vec<f64> = match spec.alpha {
                Some(a) => alloc::vec![a],
                None => ALPHA_GRID.to_vec(),
            };
            let metric = cfg.metrics[0];
            let mut best: Option<(f64, Backbone)> = None;
            for alpha in alphas {
                let mut m = ft.clone();
                m.store = ensemble_weight(&ft.store, &zero.store, alpha)?;
                let score = metric.evaluate(&m.predict(&prepared.validation.features)?, &prepared.validation)?;
                let score = if metric.higher_is_better() { score } else { -score };
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    best = Some((score, m));
                }
            }
            Ok(Predictor::Single(Net::Backbone(best.expect("non-empty alpha grid").1)))
        })(),
    };
    out.map_err(wrap)
}

/// Metric records of one trained regime, ID split first.
pub fn evaluate_records(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    regime: &str,
    seed: u64,
    predictor: &Predictor,
) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for split in EvalSplit::BOTH {
        let data = match split {
            EvalSplit::Id => &prepared.bundle.id_test,
            EvalSplit::Ood => &prepared.bundle.ood_test,
        };
        let preds = predictor.predict(&data.features)?;
        for &metric in &cfg.metrics {
            out.push(MetricRecord {
                experiment_id: cfg.experiment_id.clone(),
                regime: regime.into(),
                seed,
                split,
                metric,
                value: metric.evaluate(&preds, data)?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub regime: String,
    pub split: EvalSplit,
    pub metric: Metric,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    libm::sqrt(values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64)
}

/// Median, mean and spread per (regime, split, metric), in first-seen order.
pub fn aggregate(records: &[MetricRecord]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, EvalSplit, Metric)> = Vec::new();
    for r in records {
        let k = (r.regime.clone(), r.split, r.metric);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(regime, split, metric)| {
            let vals: Vec<f64> =
                records.iter().filter(|r| r.regime == regime && r.split == split && r.metric == metric).map(|r| r.value).collect();
            Aggregate { regime, split, metric, median: median(&vals), mean: mean(&vals), std: std_dev(&vals) }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub experiment_id: String,
    pub records: Vec<MetricRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    /// `by_regime_seed[r][s]` holds the records of regime `r`, seed index `s`.
    pub fn assemble(experiment_id: &str, by_regime_seed: Vec<Vec<Vec<MetricRecord>>>) -> Self {
        let records: Vec<MetricRecord> = by_regime_seed.into_iter().flatten().flatten().collect();
        let aggregates = aggregate(&records);
        Self { experiment_id: experiment_id.into(), records, aggregates }
    }

    pub fn aggregate_for(&self, regime: &str, split: EvalSplit, metric: Metric) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.regime == regime && a.split == split && a.metric == metric)
    }
}

/// Trains and evaluates every (regime, seed) pair in order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let prepared = prepare(cfg)?;
    let mut grid: Vec<Vec<Vec<MetricRecord>>> = cfg.regimes.iter().map(|_| Vec::new()).collect();
    for &seed in &cfg.seeds {
        let ctx = prepare_seed(cfg, &prepared, seed)?;
        for (spec, slot) in cfg.regimes.iter().zip(grid.iter_mut()) {
            let p = run_regime(cfg, &prepared, &ctx, spec)?;
            slot.push(evaluate_records(cfg, &prepared, &spec.name, seed, &p)?);
        }
    }
    Ok(ExperimentReport::assemble(&cfg.experiment_id, grid))
}

// ---- layer sweep ----

/// The single-tap LEVI regimes of a layer sweep, one per block.
pub fn sweep_regimes(cfg: &ExperimentConfig) -> Result<Vec<RegimeSpec>> {
    let template = cfg
        .regimes
        .iter()
        .find(|r| r.regime == Regime::Levi)
        .ok_or_else(|| Error::Config("a layer sweep needs a `levi` regime as template".into()))?;
    Ok((1..=cfg.model.blocks)
        .map(|t| RegimeSpec {
            name: format!("tap{t}"),
            taps: Some(alloc::vec![t]),
            head_weights: Some(alloc::vec![1.0]),
            ..template.clone()
        })
        .collect())
}

/// Config whose regimes are the sweep's single-tap regimes.
pub fn sweep_config(cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig { regimes: sweep_regimes(cfg)?, ..cfg.clone() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub tap: usize,
    pub id_median: f64,
    pub ood_median: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub metric: Metric,
    pub rows: Vec<SweepRow>,
    pub id_best_tap: usize,
    pub ood_best_tap: usize,
    /// Last tap best on ID and first tap best on OOD.
    pub trend: bool,
}

/// Per-tap medians of the first configured metric. Ties go to the lower tap.
pub fn summarize_sweep(report: &ExperimentReport, metric: Metric, blocks: usize) -> Result<SweepSummary> {
    let mut rows = Vec::new();
    for tap in 1..=blocks {
        let name = format!("tap{tap}");
        let get = |split| {
            report
                .aggregate_for(&name, split, metric)
                .map(|a| a.median)
                .ok_or_else(|| Error::Config(format!("sweep report lacks `{name}`")))
        };
        rows.push(SweepRow { tap, id_median: get(EvalSplit::Id)?, ood_median: get(EvalSplit::Ood)? });
    }
    let best = |f: &dyn Fn(&SweepRow) -> f64| {
        let sign = if metric.higher_is_better() { 1.0 } else { -1.0 };
        rows.iter().fold((0usize, f64::NEG_INFINITY), |acc, r| if sign * f(r) > acc.1 { (r.tap, sign * f(r)) } else { acc }).0
    };
    let id_best_tap = best(&|r| r.id_median);
    let ood_best_tap = best(&|r| r.ood_median);
    Ok(SweepSummary { metric, trend: id_best_tap == blocks && ood_best_tap == 1, rows, id_best_tap, ood_best_tap })
}

pub fn layer_sweep(cfg: &ExperimentConfig) -> Result<(ExperimentReport, SweepSummary)> {
    let sweep = sweep_config(cfg)?;
    let report = run_experiment(&sweep)?;
    let summary = summarize_sweep(&report, cfg.metrics[0], cfg.model.blocks)?;
    Ok((report, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn metric_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0], &[1.0]).unwrap(), 2.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 2.5 * 2f64.sqrt()).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
        let p = Tensor::matrix(4, 2, vec![0.9, 0.1, 0.2, 0.8, 0.3, 0.7, 0.6, 0.4]).unwrap();
        assert_eq!(accuracy(&p, &[0.0, 1.0, 1.0, 1.0]).unwrap(), 75.0);
        assert_eq!(accuracy(&p, &[0.0, 1.0, 1.0, 0.0]).unwrap(), 100.0);
        assert_eq!(accuracy(&p, &[1.0, 0.0, 0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn aggregates() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(std_dev(&[5.0]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn param_counts_of_small_models() {
        let mut s = crate::param::ParamStore::new();
        let mut rng = SeedPath::root(0).rng();
        crate::model::Linear::new(&mut s, "a", 5, 1, &mut rng);
        assert_eq!(s.count(false), 6);
        crate::model::Linear::new(&mut s, "b", 5, 4, &mut rng);
        crate::model::Linear::new(&mut s, "c", 4, 1, &mut rng);
        assert_eq!(s.count(false) - 6, 29);
    }

    #[test]
    fn flop_rules() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3, 5]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(graph_flops(&g, 0), 60);
        g.relu(c).unwrap();
        assert_eq!(graph_flops(&g, 0), 70);
    }

    #[test]
    fn levi_flops_are_additive() {
        let data = SpuriousSpec::default();
        let spec = ModelSpec::default();
        let bb = fresh_backbone(spec.backbone_config(&data), 0);
        let mut rng = SeedPath::root(0).rng();
        let c = LeviComposition::new(&bb, LeviConfig::all_blocks(4, Some(spec.task_config(&data))), &mut rng).unwrap();
        let parts = levi_flop_breakdown(&c, 7).unwrap();
        assert_eq!(count_flops(&c, 7).unwrap(), parts.total());
        assert_eq!(parts.backbone, count_flops(&bb, 7).unwrap());
        assert_eq!(parts.heads.len(), 4);
    }

    fn tiny(regimes: Vec<RegimeSpec>) -> ExperimentConfig {
        ExperimentConfig {
            experiment_id: "t".into(),
            data: SpuriousSpec { samples: 40, seed: 1, ..SpuriousSpec::default() },
            model: ModelSpec { hidden: 8, blocks: 2, task_widths: vec![8], task_out: 4, head_width: 8, ..ModelSpec::default() },
            pretrain: TrainConfig { steps: 5, lr: 1e-2, batch_size: 40, ..TrainConfig::default() },
            regimes,
            seeds: vec![3, 4],
            metrics: vec![Metric::Accuracy],
        }
    }

    fn quick(name: &str, r: Regime) -> RegimeSpec {
        let mut s = RegimeSpec::new(name, r);
        s.train = TrainConfig { steps: 3, lr: 1e-2, batch_size: 16, ..TrainConfig::default() };
        s
    }

    #[test]
    fn every_regime_runs_and_reports_once_per_cell() {
        let mut ens = quick("a2", Regime::EnsOutput);
        ens.members = vec!["ft".into(), "task".into(), "ft#1".into()];
        let mut l2f = quick("lp_then_ft", Regime::LpThenFt);
        l2f.phase2 = Some(l2f.train.clone());
        let mut lora = quick("lora", Regime::Lora);
        lora.lora_rank = 2;
        let mut a5 = quick("a5", Regime::Task);
        a5.task_heads = 3;
        let mut a3 = quick("a3", Regime::Levi);
        a3.levi_task = false;
        let regimes = vec![
            quick("ft", Regime::Ft),
            quick("ht", Regime::Ht),
            quick("lp", Regime::Lp),
            quick("fs", Regime::Fs),
            quick("levi", Regime::Levi),
            quick("ens_weight", Regime::EnsWeight),
            ens,
            l2f,
            lora,
            a5,
            a3,
        ];
        let cfg = tiny(regimes);
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.records.len(), 11 * 2 * 2);
        assert_eq!(report.aggregates.len(), 11 * 2);
        assert!(report.records.iter().all(|r| (0.0..=100.0).contains(&r.value)));
        assert_eq!(run_experiment(&cfg).unwrap(), report);
    }

    #[test]
    fn ft_equals_fs_without_pretraining() {
        let mut cfg = tiny(vec![quick("ft", Regime::Ft), quick("fs", Regime::Fs)]);
        cfg.pretrain.steps = 0;
        let report = run_experiment(&cfg).unwrap();
        for split in EvalSplit::BOTH {
            let a = report.aggregate_for("ft", split, Metric::Accuracy).unwrap();
            let b = report.aggregate_for("fs", split, Metric::Accuracy).unwrap();
            assert_eq!(a.median, b.median);
        }
    }

    #[test]
    fn sweep_emits_one_row_per_block() {
        let mut cfg = tiny(vec![quick("levi", Regime::Levi)]);
        cfg.model.blocks = 1;
        let (_, s) = layer_sweep(&cfg).unwrap();
        assert_eq!(s.rows.len(), 1);
        assert_eq!((s.id_best_tap, s.ood_best_tap), (1, 1));
    }

    #[test]
    fn failures_name_regime_and_seed() {
        let mut bad = quick("ft", Regime::Ft);
        bad.train.lr = 1e300;
        bad.train.optimizer = crate::optim::OptimizerKind::Sgd;
        bad.train.steps = 50;
        let err = run_experiment(&tiny(vec![bad])).unwrap_err();
        assert!(matches!(err, Error::Run { seed: 3, .. }), "{err:?}");
    }
}
