//! On-disk formats: report CSV, summary JSON, layer-sweep CSV, bundle
//! export and parameter checkpoints. Every file is written atomically.
//!
//! Floats in CSV files carry exactly 17 significant digits: positional
//! notation when the decimal exponent lies in `-5..17`, otherwise
//! `d.dddddddddddddddde±x`. Either form parses back to the same `f64`.
//!
//! Report files are named `report.v1.csv` with header
//! `experiment_id,regime,seed,split,metric,value`. Summary files carry
//! `"schema_version": 1`.
//!
//! Checkpoints are text:
//!
//! ```text
//! levi-checkpoint 1
//! params <count>
//! param <name> <trainable:0|1> <extent> <extent> ...
//! <16 hex digits per value, space separated, IEEE-754 bits>
//! ```
//!
//! with one `param` line and one data line per tensor.

use std::io::Write;
use std::path::{Path, PathBuf};

use levi_core::data::{Split, SpuriousDatasetBundle};
use levi_core::harness::{aggregate, EvalSplit, ExperimentReport, Metric, MetricRecord, SweepSummary};
use levi_core::param::ParamStore;
use levi_core::tensor::Tensor;
use serde_json::{json, Map, Value};

pub const REPORT_FILE: &str = "report.v1.csv";
pub const SUMMARY_FILE: &str = "summary.v1.json";
pub const SWEEP_FILE: &str = "layer_sweep.v1.csv";
pub const SWEEP_SUMMARY_FILE: &str = "layer_sweep_summary.v1.json";
pub const CONFIG_ECHO_FILE: &str = "config.resolved.cfg";
pub const SCHEMA_VERSION: u64 = 1;
pub const REPORT_HEADER: [&str; 6] = ["experiment_id", "regime", "seed", "split", "metric", "value"];
const CHECKPOINT_MAGIC: &str = "levi-checkpoint 1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| FormatError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Formats `v` with 17 significant digits.
pub fn sig17(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0.0000000000000000".into() } else { "0.0000000000000000".into() };
    }
    let sci = format!("{v:.16e}");
    let exp: i32 = sci.rsplit_once('e').and_then(|(_, e)| e.parse().ok()).expect("exponent present");
    if (-5..17).contains(&exp) {
        format!("{v:.prec$}", prec = (16 - exp) as usize)
    } else {
        sci
    }
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn report_csv(records: &[MetricRecord]) -> Vec<u8> {
    csv_bytes(
        &REPORT_HEADER,
        records.iter().map(|r| {
            vec![
                r.experiment_id.clone(),
                r.regime.clone(),
                r.seed.to_string(),
                r.split.name().into(),
                r.metric.name().into(),
                sig17(r.value),
            ]
        }),
    )
}

pub fn read_report_csv(path: &Path) -> Result<Vec<MetricRecord>, FormatError> {
    let parse_err = |message: String| FormatError::Parse { path: path.to_path_buf(), message };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let header = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != REPORT_HEADER {
        return Err(parse_err(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        let bad = |what: &str| parse_err(format!("row {}: bad {what}", i + 2));
        out.push(MetricRecord {
            experiment_id: row[0].to_string(),
            regime: row[1].to_string(),
            seed: row[2].parse().map_err(|_| bad("seed"))?,
            split: row[3].parse().map_err(|_| bad("split"))?,
            metric: row[4].parse().map_err(|_| bad("metric"))?,
            value: row[5].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(out)
}

/// Nested `regime → split → metric → {median, mean, std}`.
pub fn summary_json(experiment_id: &str, records: &[MetricRecord]) -> Value {
    let mut regimes = Map::new();
    for a in aggregate(records) {
        let by_split = regimes.entry(a.regime.clone()).or_insert_with(|| json!({}));
        let by_metric = by_split.as_object_mut().expect("object").entry(a.split.name()).or_insert_with(|| json!({}));
        by_metric
            .as_object_mut()
            .expect("object")
            .insert(a.metric.name().into(), json!({ "median": a.median, "mean": a.mean, "std": a.std }));
    }
    json!({
        "schema_version": SCHEMA_VERSION,
        "experiment_id": experiment_id,
        "summary": Value::Object(regimes),
    })
}

pub fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<(), FormatError> {
    write_atomic(&dir.join(REPORT_FILE), &report_csv(&report.records))?;
    write_atomic(&dir.join(SUMMARY_FILE), &json_bytes(&summary_json(&report.experiment_id, &report.records)))
}

pub fn sweep_csv(s: &SweepSummary) -> Vec<u8> {
    csv_bytes(
        &["tap", "metric", "id_median", "ood_median"],
        s.rows.iter().map(|r| vec![r.tap.to_string(), s.metric.name().into(), sig17(r.id_median), sig17(r.ood_median)]),
    )
}

pub fn sweep_summary_json(experiment_id: &str, s: &SweepSummary, records: &[MetricRecord]) -> Value {
    let mut v = summary_json(experiment_id, records);
    let obj = v.as_object_mut().expect("object");
    obj.insert("metric".into(), json!(s.metric.name()));
    obj.insert("id_best_tap".into(), json!(s.id_best_tap));
    obj.insert("ood_best_tap".into(), json!(s.ood_best_tap));
    obj.insert("trend_last_id_first_ood".into(), json!(s.trend));
    v
}

pub fn write_sweep(dir: &Path, report: &ExperimentReport, s: &SweepSummary) -> Result<(), FormatError> {
    write_atomic(&dir.join(REPORT_FILE), &report_csv(&report.records))?;
    write_atomic(&dir.join(SWEEP_FILE), &sweep_csv(s))?;
    write_atomic(&dir.join(SWEEP_SUMMARY_FILE), &json_bytes(&sweep_summary_json(&report.experiment_id, s, &report.records)))
}

/// One CSV per split, columns `f0..f{d-1},label`.
pub fn split_csv(split: &Split) -> Vec<u8> {
    let d = split.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(
        &header_refs,
        (0..split.len()).map(|r| {
            let mut row: Vec<String> = split.features.row(r).iter().map(|&v| sig17(v)).collect();
            row.push(sig17(split.labels.data()[r]));
            row
        }),
    )
}

pub fn export_bundle(dir: &Path, bundle: &SpuriousDatasetBundle) -> Result<(), FormatError> {
    for (kind, split) in bundle.splits() {
        write_atomic(&dir.join(format!("{}.csv", kind.name())), &split_csv(split))?;
    }
    Ok(())
}

pub fn checkpoint_text(store: &ParamStore) -> String {
    let mut s = format!("{CHECKPOINT_MAGIC}\nparams {}\n", store.len());
    for (_, p) in store.iter() {
        let mut meta = vec!["param".to_string(), p.name.clone(), u8::from(p.trainable).to_string()];
        meta.extend(p.value.shape().iter().map(usize::to_string));
        s.push_str(&meta.join(" "));
        s.push('\n');
        let data: Vec<String> = p.value.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect();
        s.push_str(&data.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_checkpoint(text: &str) -> Result<ParamStore, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err("missing `levi-checkpoint 1` header".into());
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .and_then(|n| n.parse().ok())
        .ok_or("missing `params <count>` line")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let meta = lines.next().ok_or(format!("parameter {i}: missing header"))?;
        let mut parts = meta.split_whitespace();
        if parts.next() != Some("param") {
            return Err(format!("parameter {i}: expected `param` line"));
        }
        let name = parts.next().ok_or(format!("parameter {i}: missing name"))?.to_string();
        let trainable = match parts.next() {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(format!("parameter `{name}`: bad trainable flag")),
        };
        let shape: Vec<usize> =
            parts.map(|p| p.parse().map_err(|_| format!("parameter `{name}`: bad extent `{p}`"))).collect::<Result<_, _>>()?;
        let data_line = lines.next().ok_or(format!("parameter `{name}`: missing data"))?;
        let data: Vec<f64> = data_line
            .split_whitespace()
            .map(|h| u64::from_str_radix(h, 16).map(f64::from_bits).map_err(|_| format!("parameter `{name}`: bad value `{h}`")))
            .collect::<Result<_, _>>()?;
        let value = Tensor::new(&shape, data).map_err(|e| format!("parameter `{name}`: {e}"))?;
        if store.find(&name).is_some() {
            return Err(format!("duplicate parameter `{name}`"));
        }
        store.add(name, value, trainable);
    }
    Ok(store)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<(), FormatError> {
    write_atomic(path, checkpoint_text(store).as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_checkpoint(&text).map_err(|message| FormatError::Parse { path: path.to_path_buf(), message })
}

/// Looks up one aggregate in a summary document.
pub fn summary_value(summary: &Value, regime: &str, split: EvalSplit, metric: Metric, stat: &str) -> Option<f64> {
    summary.get("summary")?.get(regime)?.get(split.name())?.get(metric.name())?.get(stat)?.as_f64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig17_round_trips_and_counts_digits() {
        for v in [75.5, 0.1, 1.0 / 3.0, -2.0 / 3.0, 1e-9, 123456789012345680000.0, 100.0, 0.0] {
            let s = sig17(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
            let digits = s.split('e').next().unwrap().chars().filter(char::is_ascii_digit).collect::<String>();
            let significant = digits.trim_start_matches('0');
            assert!(v == 0.0 || significant.len() == 17, "{s}");
        }
        assert_eq!(sig17(75.5), "75.500000000000000");
        assert_eq!(sig17(0.1), "0.10000000000000001");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0]).unwrap(), true);
        s.add("scalar", Tensor::scalar(2.5), false);
        let back = parse_checkpoint(&checkpoint_text(&s)).unwrap();
        assert!(back.bits_equal_where(&s, |_| true));
        assert_eq!(back.count(true), 4);
        assert!(parse_checkpoint("levi-checkpoint 2\n").is_err());
    }
}
