//! Runs an experiment's seeds on worker threads and merges the results in
//! configuration order, so the report does not depend on scheduling.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use levi_core::harness::{
    evaluate_records, prepare, prepare_seed, run_regime, ExperimentConfig, ExperimentReport, MetricRecord, Predictor,
};
use levi_core::model::Model;
use levi_core::Error;

use crate::formats::{self, FormatError};

/// Worker count: `LEVI_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("LEVI_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Format(#[from] FormatError),
}

type SeedResult = Result<Vec<Vec<MetricRecord>>, RunError>;

fn run_one_seed(cfg: &ExperimentConfig, prepared: &levi_core::harness::Prepared, seed: u64, checkpoints: Option<&Path>) -> SeedResult {
    let ctx = prepare_seed(cfg, prepared, seed)?;
    let mut out = Vec::with_capacity(cfg.regimes.len());
    for spec in &cfg.regimes {
        let predictor = run_regime(cfg, prepared, &ctx, spec)?;
        let records = evaluate_records(cfg, prepared, &spec.name, seed, &predictor)?;
        let line: Vec<String> =
            records.iter().map(|r| format!("{} {}={:.2}", r.split.name(), r.metric.name(), r.value)).collect();
        eprintln!("[{}/seed {seed}] {}: {}", cfg.experiment_id, spec.name, line.join(" "));
        if let Some(dir) = checkpoints {
            save_checkpoints(dir, &spec.name, seed, &predictor)?;
        }
        out.push(records);
    }
    Ok(out)
}

fn save_checkpoints(dir: &Path, regime: &str, seed: u64, p: &Predictor) -> Result<(), FormatError> {
    for (i, m) in p.members().iter().enumerate() {
        let path = dir.join(format!("{regime}.seed{seed}.member{i}.ckpt"));
        formats::write_checkpoint(&path, m.store())?;
    }
    Ok(())
}

/// Same records as [`levi_core::harness::run_experiment`], computed in parallel over seeds.
pub fn run_parallel(cfg: &ExperimentConfig, threads: usize, checkpoints: Option<&Path>) -> Result<ExperimentReport, RunError> {
    let prepared = prepare(cfg)?;
    let n = cfg.seeds.len();
    let results: Mutex<Vec<Option<SeedResult>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = run_one_seed(cfg, &prepared, cfg.seeds[i], checkpoints);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut by_regime: Vec<Vec<Vec<MetricRecord>>> = cfg.regimes.iter().map(|_| Vec::new()).collect();
    for r in results.into_inner().expect("no poisoned workers") {
        for (slot, recs) in by_regime.iter_mut().zip(r.expect("every seed ran")?) {
            slot.push(recs);
        }
    }
    Ok(ExperimentReport::assemble(&cfg.experiment_id, by_regime))
}
