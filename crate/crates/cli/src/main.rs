use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emfim::experiment::{DmChoice, FimMethod};
use emfim::spsa::FimMode;
use emfim::{run_experiment, ExperimentConfig, Task};

/// Fisher information for EM estimates: Monte Carlo SPSA estimator and
/// Louis, Oakes and SEM baselines.
#[derive(Parser)]
#[command(name = "emfim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run EM only and report theta*.
    Fit(Common),
    /// Estimate one information matrix.
    Fim {
        #[command(flatten)]
        common: Common,
        /// Defaults to expected for spsa and observed for the other methods.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum, default_value = "spsa")]
        method: FimArg,
    },
    /// Estimate the Jacobian of the EM map.
    Dm {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "sem")]
        method: DmArg,
    },
    /// Run every enabled method and print the error table.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte Carlo replicates, overriding spsa.N.
    #[arg(long = "N")]
    n_replicates: Option<usize>,
    /// Perturbation size, overriding spsa.c.
    #[arg(long)]
    c: Option<f64>,
    /// Report path (JSON), overriding `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Expected,
    Observed,
}

#[derive(Clone, Copy, ValueEnum)]
enum FimArg {
    Spsa,
    Louis,
    Oakes,
    Sem,
}

#[derive(Clone, Copy, ValueEnum)]
enum DmArg {
    Sem,
    Spsa,
    Fd,
}

const THREADS_ENV: &str = "EMFIM_THREADS";

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, task) = match cli.command {
        Command::Fit(c) => (c, Task::Fit),
        Command::Fim { common, mode, method } => (
            common,
            Task::Fim {
                mode: match (mode, method) {
                    (Some(ModeArg::Expected), _) | (None, FimArg::Spsa) => FimMode::Expected,
                    (Some(ModeArg::Observed), _) | (None, _) => FimMode::Observed,
                },
                method: match method {
                    FimArg::Spsa => FimMethod::Spsa,
                    FimArg::Louis => FimMethod::Louis,
                    FimArg::Oakes => FimMethod::Oakes,
                    FimArg::Sem => FimMethod::Sem,
                },
            },
        ),
        Command::Dm { common, method } => (
            common,
            Task::Dm {
                method: match method {
                    DmArg::Sem => DmChoice::Sem,
                    DmArg::Spsa => DmChoice::Spsa,
                    DmArg::Fd => DmChoice::Fd,
                },
            },
        ),
        Command::Compare(c) => (c, Task::Compare),
    };

    if let Ok(value) = std::env::var(THREADS_ENV) {
        let threads = match value.parse::<usize>() {
            Ok(t) if t > 0 => t,
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{value}`");
                return ExitCode::from(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let mut config = match ExperimentConfig::load(&common.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(n) = common.n_replicates {
        config.spsa.n_replicates = n;
    }
    if let Some(c) = common.c {
        config.spsa.c = c;
    }
    // --out is relative to the working directory; `output` to the config file
    let out_path = common
        .out
        .or_else(|| config.output.as_ref().map(|p| config.resolve(p)));

    let report = match run_experiment(&config, task) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    print!("{}", report.summary());
    if let Some(path) = out_path {
        if let Err(e) = report.write(&path) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    ExitCode::SUCCESS
}
