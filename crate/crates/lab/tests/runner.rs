use levi_core::harness::run_experiment;
use levi_lab::config;
use levi_lab::formats::report_csv;
use levi_lab::runner::run_parallel;

const CFG: &str = "\
experiment_id = threads
seeds = 3, 1, 4
[data]
samples = 60
[model]
hidden = 5
blocks = 2
[pretrain]
steps = 4
batch_size = 16
[train]
steps = 4
batch_size = 16
[regime.ft]
kind = ft
[regime.ens]
kind = ens_output
members = ft, ft#1
[regime.levi]
kind = levi
";

#[test]
fn parallel_report_matches_sequential_for_any_thread_count() {
    let cfg = config::parse(CFG).unwrap().experiment;
    let sequential = report_csv(&run_experiment(&cfg).unwrap().records);
    for threads in [1, 2, 5] {
        let parallel = report_csv(&run_parallel(&cfg, threads, None).unwrap().records);
        assert_eq!(parallel, sequential, "{threads} threads");
    }
}
