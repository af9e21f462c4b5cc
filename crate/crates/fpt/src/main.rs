use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use fpt::commands;
use fpt::output::OutputSet;
use fpt::{CliError, FlagOverrides, RunConfig};
use fpt_core::{Family, SurrogateKind};

/// First-passage-time statistics for tick-by-tick prices.
#[derive(Parser)]
#[command(name = "fpt", version)]
struct Cli {
    /// Run seed (the config file wins when it sets one).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; output bytes do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory [default: fpt-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML run configuration; its values override flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and clean tick files.
    Ingest { inputs: Vec<PathBuf> },
    /// Generate synthetic tick files plus a config that reads them back.
    Synth,
    /// First-passage surfaces and the Gaussian gap table.
    Estimate { inputs: Vec<PathBuf> },
    /// Scaling collapses and their dispersion.
    Collapse {
        inputs: Vec<PathBuf>,
        /// Surface JSON files from `estimate` instead of raw data.
        #[arg(long = "surface")]
        surfaces: Vec<PathBuf>,
    },
    /// Shuffle-surrogate experiments.
    Surrogate {
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        kind: Vec<KindArg>,
        #[arg(long)]
        replicates: Option<u32>,
    },
    /// Modified Weibull / Student fits and the crossover sweep.
    Fit {
        inputs: Vec<PathBuf>,
        /// Surface JSON files from `estimate` instead of raw data.
        #[arg(long = "surface")]
        surfaces: Vec<PathBuf>,
        #[arg(long, value_enum)]
        family: Vec<FamilyArg>,
        /// Also fit each horizon separately.
        #[arg(long)]
        per_horizon: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Weibull,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    ShuffleReturns,
    ShuffleTimes,
}

fn inputs(c: &Command) -> Vec<PathBuf> {
    match c {
        Command::Ingest { inputs }
        | Command::Estimate { inputs }
        | Command::Collapse { inputs, .. }
        | Command::Surrogate { inputs, .. }
        | Command::Fit { inputs, .. } => inputs.clone(),
        Command::Synth => Vec::new(),
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let flags = FlagOverrides { seed: cli.seed, threads: cli.threads, out: cli.out.clone(), inputs: inputs(&cli.command) };
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.merge_flags(&flags);
    if let Command::Surrogate { kind, replicates, .. } = &cli.command {
        if cfg.surrogate.kinds.is_none() && !kind.is_empty() {
            cfg.surrogate.kinds = Some(
                kind.iter()
                    .map(|k| match k {
                        KindArg::ShuffleReturns => SurrogateKind::ShuffleReturns,
                        KindArg::ShuffleTimes => SurrogateKind::ShuffleTimes,
                    })
                    .collect(),
            );
        }
        cfg.surrogate.replicates = cfg.surrogate.replicates.or(*replicates);
    }
    if cfg.threads == Some(0) {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    cfg.validate()?;
    let pool = fpt::pipeline::thread_pool(cfg.threads)?;
    let outputs: OutputSet = pool.install(|| match &cli.command {
        Command::Ingest { .. } => commands::cmd_ingest(&cfg),
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Estimate { .. } => commands::cmd_estimate(&cfg),
        Command::Collapse { surfaces, .. } => commands::cmd_collapse(&cfg, surfaces),
        Command::Surrogate { .. } => commands::cmd_surrogate(&cfg),
        Command::Fit { surfaces, family, per_horizon, .. } => {
            let families: Vec<Family> = family
                .iter()
                .map(|f| match f {
                    FamilyArg::Weibull => Family::Weibull,
                    FamilyArg::Student => Family::Student,
                })
                .collect();
            commands::cmd_fit(&cfg, surfaces, &families, *per_horizon)
        }
    })?;
    outputs.commit(&cfg.out_dir())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("fpt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
