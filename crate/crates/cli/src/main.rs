mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

/// Measurement-based cooling of a thermal resonator: simulation, search and
/// reinforcement-learning optimisation of UM/CM sequences.
#[derive(Debug, Parser)]
#[command(name = "mbcool", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed (overrides run.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Resonator temperature in kelvin (overrides physics.temperature and physics.x).
    #[arg(long, global = true, conflicts_with = "x")]
    temperature: Option<f64>,
    /// Dimensionless inverse temperature (overrides physics.temperature and physics.x).
    #[arg(long, global = true)]
    x: Option<f64>,
    /// Rounds per sequence (overrides run.n).
    #[arg(long = "N", global = true)]
    n: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mean population after one UM round over a grid of intervals.
    ScanTau(ScanTauArgs),
    /// Run one sequence and write its trace.
    Simulate(SimulateArgs),
    /// Enumerate every sequence of length N.
    Exhaustive(ExhaustiveArgs),
    /// Step-wise greedy baseline.
    Greedy,
    /// Train a PPO policy.
    Train,
    /// Roll out a trained policy.
    Generate(GenerateArgs),
    /// Regenerate the data behind a figure.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct ScanTauArgs {
    /// Temperatures in kelvin, comma separated (overrides scan.temperatures).
    #[arg(long, value_delimiter = ',')]
    temperatures: Option<Vec<f64>>,
    #[arg(long)]
    tau_max: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct SequenceSource {
    /// Named family: S_u, S_c or S_k.
    #[arg(long)]
    pattern: Option<String>,
    /// Explicit 0/1 string, 0 = UM, 1 = CM.
    #[arg(long)]
    sequence: Option<String>,
    /// Policy checkpoint to roll out greedily.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    source: SequenceSource,
}

#[derive(Debug, Args)]
pub struct ExhaustiveArgs {
    /// final-c or summed-c (overrides search.metric).
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Allow N above the enumeration guard.
    #[arg(long)]
    allow_large: bool,
    /// Enumerate on the calling thread only.
    #[arg(long)]
    single_core: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Figure {
    Fig1,
    Fig3,
    Fig4,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    figure: Figure,
    /// fig3: load S_opt from this checkpoint instead of training.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// fig4: load `T<temperature>K/policy.ckpt` from this directory instead of training.
    #[arg(long)]
    load_dir: Option<PathBuf>,
}

fn resolve(global: &Global) -> Result<RunConfig> {
    let mut config = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(t) = global.temperature {
        config.physics.temperature = Some(t);
        config.physics.x = None;
    }
    if let Some(x) = global.x {
        config.physics.x = Some(x);
        config.physics.temperature = None;
    }
    if let Some(seed) = global.seed {
        config.run.seed = seed;
    }
    if let Some(n) = global.n {
        config.run.n = n;
    }
    if config.physics.temperature.is_none() && config.physics.x.is_none() {
        config.physics.temperature = Some(config::DEFAULT_TEMPERATURE);
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.global.threads {
        if threads == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()?;
    }
    let config = resolve(&cli.global)?;
    let out = &cli.global.out_dir;
    match cli.command {
        Command::ScanTau(args) => commands::scan_tau(&config, &cli.global, &args, out),
        Command::Simulate(args) => commands::simulate(&config, &args, out),
        Command::Exhaustive(args) => commands::exhaustive(&config, &args, out),
        Command::Greedy => commands::greedy(&config, out),
        Command::Train => commands::train(&config, out),
        Command::Generate(args) => commands::generate(&config, &args, out),
        Command::Reproduce(args) => commands::reproduce(&config, &args, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
