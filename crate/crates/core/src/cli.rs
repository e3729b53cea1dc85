//! Command-line entry point: runs a scenario in one or all modes over a
//! range of seeds and writes long-format CSV plus aggregated JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{aggregate_runs, MetricRecord};
use crate::par::Execution;
use crate::sim::{run, Mode, RunArtifact, Scenario};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "HYBRID_DDF_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Local,
    Distributed,
    DoubleCount,
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Local => vec![Mode::Local],
            ModeArg::Distributed => vec![Mode::Distributed],
            ModeArg::DoubleCount => vec![Mode::DoubleCount],
            ModeArg::All => Mode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hybrid-ddf", version, about = "Distributed hybrid-belief semantic SLAM simulator")]
pub struct Cli {
    /// Scenario JSON file.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value = "distributed")]
    pub mode: ModeArg,
    /// First seed; run i uses seed + i. Defaults to the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the scenario prune ratio.
    #[arg(long)]
    pub prune_ratio: Option<f64>,
    /// Overrides the number of Monte-Carlo samples per weight update.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Serialize)]
struct TimingRow<'a> {
    seed: u64,
    step: u64,
    mode: &'a str,
    wall_time_s: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    for row in rows {
        w.serialize(row).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Output file name of the metrics for `mode`.
pub fn metrics_file(mode: Mode, all: bool) -> String {
    if all {
        format!("metrics_{}.csv", mode.name())
    } else {
        "metrics.csv".into()
    }
}

/// Runs the command. Files written: one metrics CSV per mode, timing.csv
/// and summary.json.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut scenario = Scenario::load(&cli.scenario)?;
    if let Some(p) = cli.prune_ratio {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("--prune-ratio must be in [0, 1)"));
        }
        scenario.config.prune_ratio = p;
    }
    if let Some(n) = cli.samples {
        if n == 0 {
            return Err(Error::config("--samples must be at least 1"));
        }
        scenario.config.n_samples = n;
    }
    if cli.runs == 0 {
        return Err(Error::config("--runs must be at least 1"));
    }
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;

    let first = cli.seed.unwrap_or(scenario.config.seed);
    let seeds: Vec<u64> = (0..cli.runs).map(|i| first.wrapping_add(i)).collect();
    let modes = cli.mode.modes();
    let exec = Execution::default();

    let mut artifacts: Vec<RunArtifact> = Vec::new();
    for &mode in &modes {
        let runs = exec.map(&seeds, |&seed| run(&scenario, mode, seed, exec));
        for r in runs {
            let r = r?;
            if !cli.quiet {
                eprintln!("{} seed {} done ({} steps)", r.mode.name(), r.seed, r.steps.len());
            }
            artifacts.push(r);
        }
    }

    let all = cli.mode == ModeArg::All;
    for &mode in &modes {
        let path = cli.out.join(metrics_file(mode, all));
        let rows: Vec<&MetricRecord> = artifacts
            .iter()
            .filter(|a| a.mode == mode)
            .flat_map(|a| a.metrics())
            .collect();
        write_csv(&path, rows)?;
    }
    let timing = artifacts.iter().flat_map(|a| {
        a.steps.iter().map(|s| TimingRow {
            seed: a.seed,
            step: s.step,
            mode: a.mode.name(),
            wall_time_s: s.wall_time_s,
        })
    });
    write_csv(&cli.out.join("timing.csv"), timing)?;

    let runs: Vec<(String, Vec<MetricRecord>)> = artifacts
        .iter()
        .map(|a| (a.scenario.clone(), a.metrics().cloned().collect()))
        .collect();
    let summary = aggregate_runs(&runs)?;
    let path = cli.out.join("summary.json");
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut file, &summary).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Sizes the global worker pool from the environment, if requested.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("cannot size worker pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|_| execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
