use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use mcast_collectives::analysis::CostModelInputs;
use mcast_collectives::harness::{
    self, Algorithm, CompareReport, ExperimentConfig, HarnessError, Run, RunRecord,
};

/// Simulated multicast collectives: run experiments, compare algorithms,
/// sweep parameters and print cost models.
#[derive(Parser, Debug)]
#[command(name = "mcast", version)]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every iteration of one config and write RunRecords as CSV.
    Run(RunArgs),
    /// Run two configs (or one config with two algorithms) and print the
    /// traffic ratio second / first. `--out` also saves both RunRecords.
    Compare(CompareArgs),
    /// Expand a config over `--param key=v1,v2` lists and run the product.
    Sweep(SweepArgs),
    /// Print the closed-form cost model table.
    Model(ModelArgs),
    /// Parse and validate a config without running it.
    ValidateConfig(ValidateArgs),
}

#[derive(Args, Debug)]
struct Output {
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the event trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// One or two config files.
    #[arg(long, num_args = 1, required = true)]
    config: Vec<PathBuf>,
    /// With a single config: the two algorithms to compare.
    algorithms: Vec<Algorithm>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// `key=v1,v2,...`; nested keys are dotted (`topology.leaf_switches`).
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, Vec<String>)>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// JSON file of model inputs; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    processes: Option<u64>,
    #[arg(long)]
    buffer_size: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_param(s: &str) -> Result<(String, Vec<String>), String> {
    let (key, values) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=v1,v2 but got {s:?}"))?;
    let values: Vec<String> = values.split(',').map(str::to_string).collect();
    if key.is_empty() || values.iter().any(String::is_empty) {
        return Err(format!("empty key or value in {s:?}"));
    }
    Ok((key.to_string(), values))
}

/// Errors carrying their exit status.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Oracle(String),
    Invariant(anyhow::Error),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Oracle(_) => 3,
            Failure::Invariant(_) => 4,
            Failure::Other(_) => 1,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Failure::Config(e.into()),
            HarnessError::Invariant(_) => Failure::Invariant(e.into()),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let mut config = ExperimentConfig::from_json(&text)
        .map_err(|e| Failure::Config(anyhow::Error::new(e).context(path.display().to_string())))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn sink(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_csv(records: &[RunRecord], out: &Option<PathBuf>) -> Result<(), Failure> {
    harness::write_records(records, sink(out)?)?;
    Ok(())
}

fn check_oracles(records: &[RunRecord]) -> Result<(), Failure> {
    let failed: Vec<String> = records
        .iter()
        .filter(|r| !r.verified)
        .map(|r| format!("{} iteration {}", r.experiment_id, r.iteration))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Oracle(failed.join(", ")))
    }
}

fn write_trace(path: &Path, runs: &[Run]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for line in runs.iter().filter_map(|r| r.outcome.trace.as_ref()).flatten() {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let config = load_config(&args.config, args.seed)?;
    let runs = harness::run(&config, args.trace.is_some())?;
    for run in &runs {
        if let Some(why) = &run.oracle_failure {
            warn!("iteration {}: {why}", run.record.iteration);
        }
        info!(
            "{} iteration {}: {} link bytes, {:.6} s simulated, verified = {}",
            run.record.algorithm,
            run.record.iteration,
            run.record.total_link_bytes,
            run.record.sim_time,
            run.record.verified
        );
    }
    if let Some(path) = &args.trace {
        write_trace(path, &runs)?;
    }
    let records: Vec<RunRecord> = runs.into_iter().map(|r| r.record).collect();
    write_csv(&records, &args.output.out)?;
    check_oracles(&records)
}

fn print_report(report: &CompareReport) -> io::Result<()> {
    let (a, b) = (&report.a, &report.b);
    let mut w = io::stdout().lock();
    writeln!(w, "metric,{},{}", a.algorithm, b.algorithm)?;
    for (name, x, y) in [
        ("total_link_bytes", a.total_link_bytes, b.total_link_bytes),
        ("recovery_bytes", a.recovery_bytes, b.recovery_bytes),
        ("control_bytes", a.control_bytes, b.control_bytes),
        ("header_bytes", a.header_bytes, b.header_bytes),
    ] {
        writeln!(w, "{name},{x},{y}")?;
    }
    writeln!(w, "per_rank_send_bytes,{},{}", a.per_rank_send_bytes, b.per_rank_send_bytes)?;
    writeln!(w, "per_rank_recv_bytes,{},{}", a.per_rank_recv_bytes, b.per_rank_recv_bytes)?;
    writeln!(w, "ratio,{}", report.ratio)?;
    writeln!(w, "wire_ratio,{}", report.wire_ratio)
}

fn cmd_compare(args: CompareArgs) -> Result<(), Failure> {
    let report: CompareReport = match (args.config.as_slice(), args.algorithms.as_slice()) {
        ([a, b], []) => harness::compare(&load_config(a, args.seed)?, &load_config(b, args.seed)?)?,
        ([base], [a, b]) => harness::compare_algorithms(&load_config(base, args.seed)?, *a, *b)?,
        _ => {
            return Err(Failure::Config(anyhow::anyhow!(
                "compare takes two --config files, or one --config and two algorithm names"
            )))
        }
    };
    print_report(&report).context("writing report")?;
    let records = [report.a.clone(), report.b.clone()];
    if args.output.out.is_some() {
        write_csv(&records, &args.output.out)?;
    }
    check_oracles(&records)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let template = load_config(&args.config, args.seed)?;
    let records = harness::sweep(&template, &args.params)?;
    info!("{} runs", records.len());
    write_csv(&records, &args.output.out)?;
    check_oracles(&records)
}

fn cmd_model(args: ModelArgs) -> Result<(), Failure> {
    let mut inputs = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(e.into()))?
        }
        None => CostModelInputs::default(),
    };
    if let Some(p) = args.processes {
        inputs.participants = p;
    }
    if let Some(n) = args.buffer_size {
        inputs.buffer_size = n;
    }
    let rows = harness::model(&inputs)?;
    harness::write_model(&rows, sink(&args.output.out)?)?;
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Failure> {
    let config = load_config(&args.config, None)?;
    info!("{}: valid ({} on P = {})", args.config.display(), config.algorithm, config.processes);
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Model(a) => cmd_model(a),
        Command::ValidateConfig(a) => cmd_validate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Oracle(which) => eprintln!("error: correctness oracle failed: {which}"),
                Failure::Config(e) | Failure::Invariant(e) | Failure::Other(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(failure.code())
        }
    }
}
