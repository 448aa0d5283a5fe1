//! Experiment runner: independent seeded runs, result rows, summaries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::metrics::{aggregate, Aggregate};
use crate::harness::nested::nested_baseline_solve;
use crate::harness::stats::rank_sum_test;
use crate::problems::{from_id, BilevelProblem};
use crate::scheduler::{solve, write_trace, RunConfig, RunResult, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Drc,
    Nested,
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drc" => Ok(Algo::Drc),
            "nested" => Ok(Algo::Nested),
            other => Err(Error::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algo::Drc => "drc",
            Algo::Nested => "nested",
        })
    }
}

/// Flat configuration overrides, as read from a JSON file. Unset keys keep
/// their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub pop_u: Option<usize>,
    pub pop_l: Option<usize>,
    pub fes_u_max: Option<usize>,
    pub fes_u_var: Option<usize>,
    pub fes_l_max: Option<usize>,
    pub fes_l_var: Option<usize>,
    pub tol_u: Option<f64>,
    pub tol_l: Option<f64>,
    pub acc_stop: Option<f64>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub w_bs: Option<f64>,
    pub w_pf: Option<f64>,
    pub w_pt: Option<f64>,
    pub alpha: Option<f64>,
    pub cic_normalize: Option<bool>,
    pub cic_min_execs: Option<usize>,
    pub strict_rounds: Option<bool>,
}

impl Overrides {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$src { cfg.$($dst).+ = v; })*
            };
        }
        set!(
            pop_u => pop_u,
            pop_l => pop_l,
            fes_u_max => fes_u_max,
            fes_u_var => fes_u_var,
            fes_l_max => fes_l_max,
            fes_l_var => fes_l_var,
            tol_u => tol_u,
            tol_l => tol_l,
            acc_stop => acc_stop,
            gamma => spu.gamma,
            epsilon => spu.epsilon,
            w_bs => spu.w_bs,
            w_pf => spu.w_pf,
            w_pt => spu.w_pt,
            alpha => cic.alpha,
            cic_normalize => cic.normalize_weights,
            cic_min_execs => cic.min_execs,
            strict_rounds => strict_rounds,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub problem: String,
    pub m: usize,
    pub n: usize,
    pub algo: Algo,
    pub runs: usize,
    pub seed0: u64,
    pub overrides: Overrides,
    pub results: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    /// Measure wall time; when off every row reports 0 so that the results
    /// file is byte-reproducible.
    pub wall_time: bool,
}

impl ExperimentSpec {
    pub fn new(problem: impl Into<String>, m: usize, n: usize, algo: Algo, runs: usize, seed0: u64) -> Self {
        Self {
            problem: problem.into(),
            m,
            n,
            algo,
            runs,
            seed0,
            overrides: Overrides::default(),
            results: None,
            summary: None,
            trace: None,
            wall_time: true,
        }
    }

    pub fn config(&self, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::for_dims(self.m, self.n, seed);
        self.overrides.apply(&mut cfg);
        cfg
    }
}

/// One results row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub acc_u: f64,
    pub acc_l: f64,
    pub fes_u: usize,
    pub fes_l: usize,
    pub fes_total: usize,
    pub wall_s: f64,
    pub upper_gens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub m: usize,
    pub n: usize,
    pub algo: Algo,
    pub runs: usize,
    pub seed0: u64,
    pub acc_u: Aggregate,
    pub acc_l: Aggregate,
    pub fes_u: Aggregate,
    pub fes_l: Aggregate,
    pub fes_total: Aggregate,
    pub wall_s: Aggregate,
    pub upper_gens: Aggregate,
    /// Lower executions of run 0, i.e. the rows of its trace.
    pub run0_executions: usize,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub records: Vec<RunRecord>,
    pub summary: Summary,
    pub run0_trace: Vec<TraceEvent>,
}

fn run_once(problem: &BilevelProblem, algo: Algo, cfg: &RunConfig) -> Result<RunResult> {
    match algo {
        Algo::Drc => solve(problem, cfg),
        Algo::Nested => nested_baseline_solve(problem, cfg),
    }
}

fn record_of(seed: u64, res: &RunResult, wall_s: f64) -> Result<RunRecord> {
    let missing = || Error::InvalidProblem("accuracy needs known optimal values".into());
    Ok(RunRecord {
        seed,
        acc_u: res.acc_u.ok_or_else(missing)?,
        acc_l: res.acc_l.ok_or_else(missing)?,
        fes_u: res.fes_u,
        fes_l: res.fes_l,
        fes_total: res.fes_u + res.fes_l,
        wall_s,
        upper_gens: res.generations,
    })
}

fn summarize(spec: &ExperimentSpec, records: &[RunRecord], run0_executions: usize) -> Result<Summary> {
    let agg = |f: fn(&RunRecord) -> f64| aggregate(&records.iter().map(f).collect::<Vec<_>>());
    Ok(Summary {
        problem: spec.problem.clone(),
        m: spec.m,
        n: spec.n,
        algo: spec.algo,
        runs: spec.runs,
        seed0: spec.seed0,
        acc_u: agg(|r| r.acc_u)?,
        acc_l: agg(|r| r.acc_l)?,
        fes_u: agg(|r| r.fes_u as f64)?,
        fes_l: agg(|r| r.fes_l as f64)?,
        fes_total: agg(|r| r.fes_total as f64)?,
        wall_s: agg(|r| r.wall_s)?,
        upper_gens: agg(|r| r.upper_gens as f64)?,
        run0_executions,
    })
}

pub fn write_records<W: Write>(records: &[RunRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs `spec.runs` independent runs with seeds `seed0, seed0 + 1, …` in
/// parallel and writes the requested files in seed order once all are done.
pub fn run_benchmark(spec: &ExperimentSpec) -> Result<BenchmarkOutput> {
    if spec.runs == 0 {
        return Err(Error::InvalidConfig("runs must be at least 1".into()));
    }
    let problem = from_id(&spec.problem, spec.m, spec.n)?;
    spec.config(spec.seed0).validate()?;

    let outcomes: Vec<(RunRecord, Vec<TraceEvent>)> = (0..spec.runs as u64)
        .into_par_iter()
        .map(|k| {
            let seed = spec.seed0 + k;
            let cfg = spec.config(seed);
            let start = Instant::now();
            let res = run_once(&problem, spec.algo, &cfg)?;
            let wall = if spec.wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
            let record = record_of(seed, &res, wall)?;
            let trace = if k == 0 { res.trace } else { Vec::new() };
            Ok((record, trace))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(outcomes.len());
    let mut run0_trace = Vec::new();
    for (k, (record, trace)) in outcomes.into_iter().enumerate() {
        records.push(record);
        if k == 0 {
            run0_trace = trace;
        }
    }
    let summary = summarize(spec, &records, run0_trace.len())?;

    if let Some(path) = &spec.results {
        write_records(&records, create(path)?)?;
    }
    if let Some(path) = &spec.summary {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &summary)?;
        writeln!(w)?;
        w.flush()?;
    }
    if let Some(path) = &spec.trace {
        write_trace(&run0_trace, create(path)?)?;
    }
    Ok(BenchmarkOutput {
        records,
        summary,
        run0_trace,
    })
}

/// Competitive versus nested runs on the same seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub problem: String,
    pub m: usize,
    pub n: usize,
    pub runs: usize,
    pub drc_fes_total: Aggregate,
    pub nested_fes_total: Aggregate,
    pub drc_acc_u: Aggregate,
    pub nested_acc_u: Aggregate,
    /// Two-sided p-value of the rank-sum test on total FEs.
    pub p_value: f64,
    pub test: String,
}

/// Runs both schedules over the same seeds and tests the total-FE samples.
pub fn compare(spec: &ExperimentSpec) -> Result<Comparison> {
    let strip = |algo| ExperimentSpec {
        algo,
        results: None,
        summary: None,
        trace: None,
        ..spec.clone()
    };
    let drc = run_benchmark(&strip(Algo::Drc))?;
    let nested = run_benchmark(&strip(Algo::Nested))?;
    let totals = |o: &BenchmarkOutput| o.records.iter().map(|r| r.fes_total as f64).collect::<Vec<_>>();
    Ok(Comparison {
        problem: spec.problem.clone(),
        m: spec.m,
        n: spec.n,
        runs: spec.runs,
        drc_fes_total: drc.summary.fes_total,
        nested_fes_total: nested.summary.fes_total,
        drc_acc_u: drc.summary.acc_u,
        nested_acc_u: nested.summary.acc_u,
        p_value: rank_sum_test(&totals(&drc), &totals(&nested))?,
        test: "two-sided unpaired Wilcoxon rank-sum".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_reject_unknown() {
        let o: Overrides = serde_json::from_str(r#"{"pop_u": 8, "alpha": 0.25, "cic_normalize": false}"#).unwrap();
        let mut cfg = RunConfig::for_dims(2, 3, 0);
        o.apply(&mut cfg);
        assert_eq!(cfg.pop_u, 8);
        assert_eq!(cfg.cic.alpha, 0.25);
        assert!(!cfg.cic.normalize_weights);
        assert_eq!(cfg.pop_l, 5);
        assert!(serde_json::from_str::<Overrides>(r#"{"popu": 8}"#).is_err());
    }

    #[test]
    fn algo_parsing() {
        assert_eq!("drc".parse::<Algo>().unwrap(), Algo::Drc);
        assert_eq!("nested".parse::<Algo>().unwrap(), Algo::Nested);
        assert!("bogus".parse::<Algo>().is_err());
    }

    #[test]
    fn unknown_problem_is_an_error() {
        let spec = ExperimentSpec::new("nope", 2, 3, Algo::Drc, 1, 0);
        assert!(matches!(run_benchmark(&spec), Err(Error::UnknownProblem(_))));
    }
}
