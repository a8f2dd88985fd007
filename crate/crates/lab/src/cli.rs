//! The `levi` command line.
//!
//! Exit codes: 0 success, 1 computational failure, 2 configuration or
//! input error. The output directory of `run` and `layer-sweep` is taken
//! from `--out`, else `LEVI_OUTPUT_DIR`, else the config's `output_dir`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use levi_core::data::{fixture_mean_l1, fixture_mismatch, fixture_rows, linear_fixture};
use levi_core::gradcheck::op_suite;
use levi_core::graph::OpKind;
use levi_core::harness::{aggregate, prepare, summarize_sweep, sweep_config, ExperimentReport};

use crate::config::{self, RunConfig};
use crate::formats;
use crate::runner::{run_parallel, worker_count, RunError};

pub const OUTPUT_DIR_ENV: &str = "LEVI_OUTPUT_DIR";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_INSTANCES: usize = 20;
const FIXTURE_TOLERANCE: f64 = 1e-12;

#[derive(Parser, Debug)]
#[command(name = "levi", version, about = "Layer-wise ensembles of a pretrained backbone and a small task model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the five-feature linear example and check it against the closed form.
    Fixture {
        /// Add this offset to the first finetuned weight (fault injection).
        #[arg(long, hide = true)]
        perturb_finetune: Option<f64>,
    },
    /// Train and evaluate every regime of a config over its seeds.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: LEVI_THREADS or available cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run one single-tap LEVI regime per backbone block.
    LayerSweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare autodiff gradients of every op with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the sign of one op's backward pass (fault injection).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Recompute the summary of an existing report directory.
    Report { dir: PathBuf },
}

/// Exit status of a command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Failed = 1,
    BadInput = 2,
}

impl From<Status> for std::process::ExitCode {
    fn from(s: Status) -> Self {
        std::process::ExitCode::from(s as u8)
    }
}

pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Status {
    match cli.command {
        Command::Fixture { perturb_finetune } => fixture(perturb_finetune, out, err),
        Command::Run { config, out: dir, threads } => run(&config, dir, threads, false, out, err),
        Command::LayerSweep { config, out: dir, threads } => run(&config, dir, threads, true, out, err),
        Command::Gradcheck { seed, inject_fault } => gradcheck(seed, inject_fault.as_deref(), out, err),
        Command::Report { dir } => report(&dir, out, err),
    }
}

/// Renders `v` as a small fraction when it is one, else as a decimal.
fn fraction(v: f64) -> String {
    for q in 1..=12u32 {
        let p = v * f64::from(q);
        if (p - p.round()).abs() < 1e-9 {
            let p = p.round() as i64;
            return if q == 1 { p.to_string() } else { format!("{p}/{q}") };
        }
    }
    format!("{v:?}")
}

fn fixture(perturb: Option<f64>, out: &mut dyn Write, err: &mut dyn Write) -> Status {
    let mut fx = linear_fixture();
    if let Some(d) = perturb {
        fx.w_finetune[0] += d;
    }
    let rows = fixture_rows(&fx);
    let _ = writeln!(out, "row,x_test,y_test,model,y_hat,l1,y_hat_value,l1_value");
    for r in &rows {
        let point: Vec<String> = r.point.iter().map(|&v| fraction(v)).collect();
        let _ = writeln!(
            out,
            "{},\"[{}]\",{},w_{},{},{},{:?},{:?}",
            r.test,
            point.join(", "),
            fraction(r.label),
            r.model,
            fraction(r.prediction),
            fraction(r.l1),
            r.prediction,
            r.l1
        );
    }
    let _ = writeln!(out, "model,mean_l1");
    for (m, v) in fixture_mean_l1(&rows) {
        let _ = writeln!(out, "{m},{v:?}");
    }
    match fixture_mismatch(&rows, FIXTURE_TOLERANCE) {
        None => Status::Ok,
        Some(msg) => {
            let _ = writeln!(err, "fixture mismatch: {msg}");
            Status::Failed
        }
    }
}

fn resolve_output(cfg: &RunConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn run(path: &Path, flag: Option<PathBuf>, threads: Option<usize>, sweep: bool, out: &mut dyn Write, err: &mut dyn Write) -> Status {
    let cfg = match config::load(path) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "config error: {e}");
            return Status::BadInput;
        }
    };
    let experiment = if sweep {
        match sweep_config(&cfg.experiment) {
            Ok(c) => c,
            Err(e) => {
                let _ = writeln!(err, "config error: {}: {e}", path.display());
                return Status::BadInput;
            }
        }
    } else {
        cfg.experiment.clone()
    };
    let dir = resolve_output(&cfg, flag);
    let threads = threads.filter(|&t| t > 0).unwrap_or_else(worker_count);
    let result = (|| -> Result<(), RunError> {
        formats::write_atomic(&dir.join(formats::CONFIG_ECHO_FILE), (cfg.echo.join("\n") + "\n").as_bytes())?;
        if cfg.export_bundle {
            formats::export_bundle(&dir.join("bundle"), &prepare(&experiment)?.bundle)?;
        }
        let ckpt = cfg.save_checkpoints.then(|| dir.join("checkpoints"));
        let report = run_parallel(&experiment, threads, ckpt.as_deref())?;
        if sweep {
            let summary = summarize_sweep(&report, experiment.metrics[0], experiment.model.blocks)?;
            formats::write_sweep(&dir, &report, &summary)?;
            let _ = writeln!(out, "tap,{}_id_median,{}_ood_median", summary.metric.name(), summary.metric.name());
            for r in &summary.rows {
                let _ = writeln!(out, "{},{},{}", r.tap, formats::sig17(r.id_median), formats::sig17(r.ood_median));
            }
            let _ = writeln!(out, "id_best_tap={} ood_best_tap={} trend={}", summary.id_best_tap, summary.ood_best_tap, summary.trend);
        } else {
            formats::write_report(&dir, &report)?;
            print_medians(&report, out);
        }
        let _ = writeln!(out, "wrote {}", dir.display());
        Ok(())
    })();
    match result {
        Ok(()) => Status::Ok,
        Err(e) => {
            let _ = writeln!(err, "run failed: {e}");
            Status::Failed
        }
    }
}

fn print_medians(report: &ExperimentReport, out: &mut dyn Write) {
    let _ = writeln!(out, "regime,split,metric,median,mean,std");
    for a in &report.aggregates {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            a.regime,
            a.split.name(),
            a.metric.name(),
            formats::sig17(a.median),
            formats::sig17(a.mean),
            formats::sig17(a.std)
        );
    }
}

fn gradcheck(seed: u64, fault: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> Status {
    let fault = match fault.map(str::parse::<OpKind>).transpose() {
        Ok(f) => f,
        Err(e) => {
            let _ = writeln!(err, "unknown op: {e}");
            return Status::BadInput;
        }
    };
    let checks = match op_suite(seed, GRADCHECK_INSTANCES, GRADCHECK_TOLERANCE, fault) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "gradcheck failed: {e}");
            return Status::Failed;
        }
    };
    let _ = writeln!(out, "op,instances,max_rel_error,status");
    for c in &checks {
        let _ = writeln!(
            out,
            "{},{},{:.3e},{}",
            c.kind.name(),
            c.instances,
            c.max_rel_error,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    let failing: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.kind.name()).collect();
    if failing.is_empty() {
        Status::Ok
    } else {
        let _ = writeln!(err, "failing ops: {}", failing.join(", "));
        Status::Failed
    }
}

fn report(dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Status {
    let records = match formats::read_report_csv(&dir.join(formats::REPORT_FILE)) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "report error: {e}");
            return Status::BadInput;
        }
    };
    let Some(id) = records.first().map(|r| r.experiment_id.clone()) else {
        let _ = writeln!(err, "report error: {} has no records", dir.join(formats::REPORT_FILE).display());
        return Status::BadInput;
    };
    let report = ExperimentReport { experiment_id: id, aggregates: aggregate(&records), records };
    let summary = formats::summary_json(&report.experiment_id, &report.records);
    if let Err(e) = formats::write_atomic(&dir.join(formats::SUMMARY_FILE), &formats::json_bytes(&summary)) {
        let _ = writeln!(err, "report error: {e}");
        return Status::Failed;
    }
    print_medians(&report, out);
    Status::Ok
}
