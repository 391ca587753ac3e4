use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfmsteer_cli::{run_command, CliError, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rfmsteer", version, about = "RFM probes and activation steering on a toy sequence model")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(short, long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides `threads` from the config (0 = all cores).
    #[arg(short = 'j', long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Synthesize the labeled concept datasets.
    GenData,
    /// Train per-layer probes and extract steering directions.
    TrainProbes,
    /// Run the steering grid and pairwise multi-direction steering.
    Steer,
    /// Sweep injection probability, top-K and kappa.
    Ablate,
    /// Temporal probe traces for schedules and the crossfade.
    Trace,
    /// Summarize all outputs into report.md.
    Report,
    /// Run every stage in order.
    All,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::TrainProbes => Command::TrainProbes,
            Cmd::Steer => Command::Steer,
            Cmd::Ablate => Command::Ablate,
            Cmd::Trace => Command::Trace,
            Cmd::Report => Command::Report,
            Cmd::All => Command::All,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?.0,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.output {
        config.output_dir = out;
    }
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let out = config.output_dir.clone();
    run_command(cli.command.into(), &config, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
