use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use drc_bilevel::harness::{compare, run_benchmark, Algo, ExperimentSpec, Overrides};

#[derive(Parser)]
#[command(version, about = "Bilevel CMA-ES with competitive lower-level scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Problem id: smd1..smd12 or synthq-<d>.
    #[arg(long)]
    problem: String,
    /// Upper and lower dimensions, e.g. `2,3`.
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize),
    #[arg(long, default_value_t = 21)]
    runs: usize,
    /// Seed of the first run; run k uses seed + k.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flat JSON file of configuration overrides.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one algorithm and write results.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "drc")]
        algo: Algo,
        /// Results CSV, one row per run.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Summary JSON with per-metric median and IQR.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Resource-allocation trace of run 0.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Report zero wall time so the results file is reproducible byte for byte.
        #[arg(long)]
        no_wall_time: bool,
    },
    /// Run both schedules on the same seeds and compare total FEs.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comparison JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let Some((m, n)) = s.split_once(',') else {
        bail!("expected <m>,<n>, got {s:?}");
    };
    Ok((m.trim().parse()?, n.trim().parse()?))
}

fn spec_from(common: &Common, algo: Algo) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::new(&common.problem, common.dims.0, common.dims.1, algo, common.runs, common.seed);
    if let Some(path) = &common.config {
        spec.overrides =
            Overrides::from_json_file(path).with_context(|| format!("reading overrides from {}", path.display()))?;
    }
    Ok(spec)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            common,
            algo,
            out,
            summary,
            trace,
            no_wall_time,
        } => {
            let mut spec = spec_from(&common, algo)?;
            spec.results = out;
            spec.summary = summary;
            spec.trace = trace;
            spec.wall_time = !no_wall_time;
            let output = run_benchmark(&spec)?;
            let s = &output.summary;
            println!(
                "{} ({},{}) {} x{}: acc_u median {:.3e} iqr {:.3e} | fes_total median {:.0} iqr {:.0}",
                s.problem, s.m, s.n, s.algo, s.runs, s.acc_u.median, s.acc_u.iqr, s.fes_total.median, s.fes_total.iqr
            );
        }
        Command::Compare { common, out } => {
            let spec = spec_from(&common, Algo::Drc)?;
            let cmp = compare(&spec)?;
            let json = serde_json::to_string_pretty(&cmp)?;
            match out {
                Some(path) => std::fs::write(&path, json + "\n")
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
        }
    }
    Ok(())
}
