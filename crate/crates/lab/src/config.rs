//! Flat key-path configuration files.
//!
//! One `key = value` pair per line; `#` starts a comment. A `[section]`
//! header prefixes the keys that follow it, so `[data]` then `samples = 10`
//! is the same as a top-level `data.samples = 10`. Lists are comma
//! separated. Regimes live under `regime.<name>.*` and run in the order
//! their names first appear; keys under `train.*` are defaults for every
//! regime.
//!
//! ```text
//! experiment_id = demo
//! seeds = 0, 1, 2
//!
//! [data]
//! samples = 500
//!
//! [regime.ft]
//! kind = ft
//! steps = 200
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use levi_core::data::{Inactive, LabelKind, Law, SpuriousSpec};
use levi_core::harness::{ExperimentConfig, Metric, ModelSpec, RegimeSpec};
use levi_core::model::EmbeddingSpec;
use levi_core::optim::OptimizerKind;
use levi_core::regime::{Mask, Regime, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, key: &str, message: impl Into<String>) -> Self {
        Self { line: Some(line), key: Some(key.into()), message: message.into() }
    }

    fn plain(message: impl Into<String>) -> Self {
        Self { line: None, key: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        if let Some(k) = &self.key {
            write!(f, "key `{k}`: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Everything a run needs beyond the experiment itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
    pub save_checkpoints: bool,
    pub export_bundle: bool,
    /// Normalised `key = value` lines, as echoed next to reports.
    pub echo: Vec<String>,
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

fn tokenize(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(line, content, "unterminated section header"))?
                .trim();
            if name.is_empty() || name.split('.').any(str::is_empty) {
                return Err(ConfigError::at(line, content, "empty section name"));
            }
            section = format!("{name}.");
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| ConfigError::at(line, content, "expected `key = value`"))?;
        let key = format!("{section}{}", k.trim());
        if k.trim().is_empty() {
            return Err(ConfigError::at(line, &key, "empty key"));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(ConfigError::at(line, &key, format!("duplicate key (first set on line {})", prev.line)));
        }
        out.push(Entry { line, key, value: v.trim().to_string() });
    }
    Ok(out)
}

fn parse_value<T: FromStr>(e: &Entry, what: &str) -> Result<T, ConfigError> {
    e.value.parse().map_err(|_| ConfigError::at(e.line, &e.key, format!("expected {what}, got `{}`", e.value)))
}

fn parse_list<T: FromStr>(e: &Entry, what: &str) -> Result<Vec<T>, ConfigError> {
    if e.value.is_empty() {
        return Ok(Vec::new());
    }
    e.value
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| ConfigError::at(e.line, &e.key, format!("expected a list of {what}, got `{}`", s.trim())))
        })
        .collect()
}

fn parse_bool(e: &Entry) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::at(e.line, &e.key, format!("expected true or false, got `{}`", e.value))),
    }
}

fn parse_core<T: FromStr<Err = levi_core::Error>>(e: &Entry) -> Result<T, ConfigError> {
    e.value.parse().map_err(|err: levi_core::Error| ConfigError::at(e.line, &e.key, err.to_string()))
}

fn parse_positive(e: &Entry) -> Result<usize, ConfigError> {
    let v: usize = parse_value(e, "a positive integer")?;
    if v == 0 {
        return Err(ConfigError::at(e.line, &e.key, "must be positive"));
    }
    Ok(v)
}

fn parse_optimizer(e: &Entry) -> Result<OptimizerKind, ConfigError> {
    match e.value.as_str() {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(ConfigError::at(e.line, &e.key, format!("unknown optimizer `{}`", e.value))),
    }
}

/// Applies a training key; `false` when `field` is not a training key.
fn apply_train(tc: &mut TrainConfig, field: &str, e: &Entry) -> Result<bool, ConfigError> {
    match field {
        "optimizer" => tc.optimizer = parse_optimizer(e)?,
        "lr" => {
            tc.lr = parse_value(e, "a number")?;
            if !(tc.lr > 0.0 && tc.lr.is_finite()) {
                return Err(ConfigError::at(e.line, &e.key, "learning rate must be positive"));
            }
        }
        "steps" => tc.steps = parse_value(e, "a step count")?,
        "batch_size" => tc.batch_size = parse_positive(e)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn parse_embeddings(e: &Entry) -> Result<Vec<EmbeddingSpec>, ConfigError> {
    let items: Vec<String> = parse_list(e, "column:cardinality:dim triples")?;
    items
        .iter()
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let nums: Option<Vec<usize>> = parts.iter().map(|p| p.parse().ok()).collect();
            match nums.as_deref() {
                Some(&[column, cardinality, dim]) => Ok(EmbeddingSpec { column, cardinality, dim }),
                _ => Err(ConfigError::at(e.line, &e.key, format!("expected column:cardinality:dim, got `{item}`"))),
            }
        })
        .collect()
}

fn unknown(e: &Entry) -> ConfigError {
    ConfigError::at(e.line, &e.key, "unknown key")
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let entries = tokenize(text)?;
    let mut data = SpuriousSpec::default();
    let mut model = ModelSpec::default();
    let mut pretrain = TrainConfig::default();
    let mut experiment_id = String::from("experiment");
    let mut seeds = vec![0u64];
    let mut metrics: Option<Vec<Metric>> = None;
    let mut output_dir = PathBuf::from("out");
    let mut save_checkpoints = false;
    let mut export_bundle = false;

    // training defaults first, so regime keys can override them wherever they appear
    let mut train_default = TrainConfig::default();
    for e in entries.iter().filter(|e| e.key.starts_with("train.")) {
        if !apply_train(&mut train_default, &e.key["train.".len()..], e)? {
            return Err(unknown(e));
        }
    }

    let mut regime_order: Vec<String> = Vec::new();
    let mut regime_entries: Vec<&Entry> = Vec::new();

    for e in &entries {
        let (head, field) = match e.key.split_once('.') {
            Some((h, f)) => (h, f),
            None => ("", e.key.as_str()),
        };
        match head {
            "" => match field {
                "experiment_id" => {
                    if e.value.is_empty() || e.value.contains(|c: char| c == ',' || c.is_whitespace()) {
                        return Err(ConfigError::at(e.line, &e.key, "must be non-empty without commas or spaces"));
                    }
                    experiment_id = e.value.clone();
                }
                "seeds" => seeds = parse_list(e, "seeds")?,
                "metrics" => {
                    let names: Vec<String> = parse_list(e, "metric names")?;
                    metrics = Some(
                        names.iter().map(|n| n.parse::<Metric>().map_err(|err| ConfigError::at(e.line, &e.key, err.to_string()))).collect::<Result<_, _>>()?,
                    );
                }
                "output_dir" => output_dir = PathBuf::from(&e.value),
                "save_checkpoints" => save_checkpoints = parse_bool(e)?,
                "export_bundle" => export_bundle = parse_bool(e)?,
                _ => return Err(unknown(e)),
            },
            "data" => match field {
                "d_spurious_pretrain" => data.d_spurious_pretrain = parse_value(e, "a feature count")?,
                "d_spurious_finetune" => data.d_spurious_finetune = parse_value(e, "a feature count")?,
                "d_transfer" => data.d_transfer = parse_positive(e)?,
                "strength_spurious_pretrain" => data.strength_spurious_pretrain = parse_value(e, "a number")?,
                "strength_spurious_finetune" => data.strength_spurious_finetune = parse_value(e, "a number")?,
                "strength_transfer" => data.strength_transfer = parse_value(e, "a number")?,
                "noise_std" => data.noise_std = parse_value(e, "a number")?,
                "samples" => data.samples = parse_positive(e)?,
                "seed" => data.seed = parse_value(e, "a seed")?,
                "label" => {
                    data.label = match e.value.as_str() {
                        "binary" => LabelKind::Binary,
                        "regression" => LabelKind::Regression,
                        _ => return Err(ConfigError::at(e.line, &e.key, format!("unknown label kind `{}`", e.value))),
                    }
                }
                "law" => {
                    data.law = match e.value.as_str() {
                        "feature_first" => Law::FeatureFirst,
                        "label_first" => Law::LabelFirst,
                        _ => return Err(ConfigError::at(e.line, &e.key, format!("unknown law `{}`", e.value))),
                    }
                }
                "inactive_spurious" => {
                    data.inactive = match e.value.as_str() {
                        "noise" => Inactive::Noise,
                        "zero" => Inactive::Zero,
                        _ => return Err(ConfigError::at(e.line, &e.key, format!("unknown inactive mode `{}`", e.value))),
                    }
                }
                _ => return Err(unknown(e)),
            },
            "model" => match field {
                "hidden" => model.hidden = parse_positive(e)?,
                "blocks" => model.blocks = parse_value(e, "a block count")?,
                "task_widths" => model.task_widths = parse_list(e, "widths")?,
                "task_out" => model.task_out = parse_positive(e)?,
                "head_width" => model.head_width = parse_positive(e)?,
                "taps" => model.taps = Some(parse_list(e, "tap indices")?),
                "head_weights" => model.head_weights = Some(parse_list(e, "weights")?),
                "embeddings" => model.embeddings = parse_embeddings(e)?,
                _ => return Err(unknown(e)),
            },
            "pretrain" => {
                if !apply_train(&mut pretrain, field, e)? {
                    return Err(unknown(e));
                }
            }
            "train" => {}
            "regime" => {
                let (name, _) = field.split_once('.').ok_or_else(|| ConfigError::at(e.line, &e.key, "expected regime.<name>.<field>"))?;
                if !regime_order.iter().any(|n| n == name) {
                    regime_order.push(name.to_string());
                }
                regime_entries.push(e);
            }
            _ => return Err(unknown(e)),
        }
    }

    let mut regimes = Vec::new();
    for name in &regime_order {
        let mine: Vec<&Entry> =
            regime_entries.iter().copied().filter(|e| e.key.split('.').nth(1) == Some(name.as_str())).collect();
        let kind_entry = mine
            .iter()
            .find(|e| e.key.ends_with(".kind") && e.key.matches('.').count() == 2)
            .ok_or_else(|| ConfigError { line: Some(mine[0].line), key: Some(format!("regime.{name}.kind")), message: "missing".into() })?;
        let regime: Regime = parse_core(kind_entry)?;
        let mut spec = RegimeSpec::new(name, regime);
        spec.train = train_default.clone();
        let mut phase2 = train_default.clone();
        let mut has_phase2 = false;
        for e in mine {
            let field = &e.key[format!("regime.{name}.").len()..];
            if apply_train(&mut spec.train, field, e)? {
                continue;
            }
            match field {
                "kind" => {}
                "phase2_lr" | "phase2_steps" | "phase2_optimizer" | "phase2_batch_size" => {
                    apply_train(&mut phase2, &field["phase2_".len()..], e)?;
                    has_phase2 = true;
                }
                "members" => spec.members = parse_list(e, "member names")?,
                "alpha" => spec.alpha = Some(parse_value(e, "a number")?),
                "lora_rank" => spec.lora_rank = parse_positive(e)?,
                "lora_targets" => spec.lora_targets = parse_list(e, "layer names")?,
                "levi_task" => spec.levi_task = parse_bool(e)?,
                "backbone_mask" => spec.levi_backbone_mask = parse_core::<Mask>(e)?,
                "taps" => spec.taps = Some(parse_list(e, "tap indices")?),
                "head_weights" => spec.head_weights = Some(parse_list(e, "weights")?),
                "task_heads" => spec.task_heads = parse_positive(e)?,
                _ => return Err(unknown(e)),
            }
        }
        if regime == Regime::LpThenFt {
            spec.phase2 = Some(phase2);
        } else if has_phase2 {
            return Err(ConfigError { line: None, key: Some(format!("regime.{name}.phase2_*")), message: "only lp_then_ft has a second phase".into() });
        }
        regimes.push(spec);
    }

    let metrics = metrics.unwrap_or_else(|| match data.label {
        LabelKind::Binary => vec![Metric::Accuracy],
        LabelKind::Regression => vec![Metric::Rmse],
    });
    let experiment = ExperimentConfig { experiment_id, data, model, pretrain, regimes, seeds, metrics };
    experiment.validate().map_err(|e| ConfigError::plain(e.to_string()))?;
    let echo = entries.iter().map(|e| format!("{} = {}", e.key, e.value)).collect();
    Ok(RunConfig { experiment, output_dir, save_checkpoints, export_bundle, echo })
}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::plain(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|mut e| {
        e.message = format!("{}: {}", path.display(), e.message);
        e
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
experiment_id = t
seeds = 1, 2
[data]
samples = 50
[train]
steps = 0
[regime.ft]
kind = ft
[regime.mix]
kind = ens_output
members = ft, task
";

    #[test]
    fn minimal_config_parses() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.experiment.seeds, vec![1, 2]);
        assert_eq!(c.experiment.data.samples, 50);
        let names: Vec<_> = c.experiment.regimes.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["ft", "mix"]);
        assert_eq!(c.experiment.regimes[0].train.steps, 0);
        assert_eq!(c.experiment.metrics, vec![Metric::Accuracy]);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = parse("seeds = 1\n[data]\nsamplez = 3\n").unwrap_err();
        assert_eq!(err.line, Some(3));
        assert_eq!(err.key.as_deref(), Some("data.samplez"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert_eq!(parse("[model]\nhidden = 0\n").unwrap_err().line, Some(2));
        assert_eq!(parse("seeds = 1, x\n").unwrap_err().line, Some(1));
        let dup = parse("seeds = 1\nseeds = 2\n").unwrap_err();
        assert!(dup.message.contains("duplicate"));
        let weights = "[regime.l]\nkind = levi\nhead_weights = 0.5, 0.6, 0.0, 0.0\n";
        assert!(parse(weights).unwrap_err().message.contains("head weights"));
        assert!(parse("[regime.x]\nsteps = 3\n").unwrap_err().message.contains("missing"));
        assert!(parse("[regime.x]\nkind = zz\n").is_err());
    }
}
