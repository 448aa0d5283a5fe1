//! Benchmark harness: metrics, statistics, the nested baseline and the
//! experiment runner behind the command-line tool.

pub mod metrics;
pub mod nested;
pub mod runner;
pub mod stats;

pub use metrics::{accuracy, aggregate, Aggregate, ACCURACY_FLOOR};
pub use nested::{nested_baseline_solve, Nested};
pub use runner::{compare, run_benchmark, Algo, BenchmarkOutput, Comparison, ExperimentSpec, Overrides, RunRecord, Summary};
pub use stats::rank_sum_test;
