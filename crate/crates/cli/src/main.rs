//! `canongen`: persisted driver for data generation, training, generation,
//! evaluation and ablations.
//!
//! Exit codes:
//!
//! | code | meaning                                              |
//! |------|------------------------------------------------------|
//! | 0    | success                                              |
//! | 1    | internal error                                       |
//! | 2    | command-line usage error                             |
//! | 3    | invalid configuration or argument                    |
//! | 4    | missing prerequisite stage or input                  |
//! | 5    | I/O failure                                          |
//! | 6    | training diverged                                    |
//! | 7    | geometric or numerical failure                       |
//! | 8    | stage conflict (partial or differently configured)   |
//! | 9    | malformed or incompatible artifact                   |

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use canongen_core::generator::Conditioning;
use canongen_core::pipeline::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_generate, cmd_train_gen, cmd_train_recon, Outcome, RunConfig, RunContext,
    Source, StageFlags,
};
use canongen_core::recon::Strategy;
use canongen_core::Error as CoreError;
use clap::{Parser, Subcommand, ValueEnum};

/// Environment variable naming the run root when `--out` is absent.
const RUN_ROOT_ENV: &str = "CANONGEN_RUN_ROOT";
const DEFAULT_ROOT: &str = "runs";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("cannot read config {path}: {source}")]
    ReadConfig { path: PathBuf, source: std::io::Error },

    #[error("config {path}: {source}")]
    ParseConfig { path: PathBuf, source: toml::de::Error },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::ReadConfig { .. } => 5,
            CliError::ParseConfig { .. } => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::InvalidArgument(_) => 3,
                CoreError::MissingPrerequisite(_) => 4,
                CoreError::Io(_) => 5,
                CoreError::Diverged { .. } => 6,
                CoreError::BehindCamera { .. }
                | CoreError::NonPositiveDepth { .. }
                | CoreError::NotEnoughPoints { .. }
                | CoreError::Degenerate(_)
                | CoreError::ProjectionFailed { .. }
                | CoreError::EmptySurface
                | CoreError::NotWatertight { .. } => 7,
                CoreError::StageConflict(_) => 8,
                CoreError::Format(_)
                | CoreError::Json(_)
                | CoreError::ShapeMismatch(_)
                | CoreError::FrameMismatch(_)
                | CoreError::Untrained(_) => 9,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Direct,
    Explicit,
    Branch,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Direct => Strategy::DirectSupervision,
            StrategyArg::Explicit => Strategy::ExplicitTransform,
            StrategyArg::Branch => Strategy::BranchRepurposing,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConditioningArg {
    PointGuided,
    LatentAugmented,
}

impl From<ConditioningArg> for Conditioning {
    fn from(c: ConditioningArg) -> Self {
        match c {
            ConditioningArg::PointGuided => Conditioning::PointGuided,
            ConditioningArg::LatentAugmented => Conditioning::LatentAugmented,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "canongen",
    version,
    about = "Canonical-space reconstruction and shape generation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Global seed, overriding the config file.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Run root directory [env: CANONGEN_RUN_ROOT; default: ./runs].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Reconstructor canonicalization strategy.
    #[arg(long, global = true, value_enum, default_value = "branch")]
    strategy: StrategyArg,

    /// Generator conditioning scheme.
    #[arg(long, global = true, value_enum, default_value = "latent-augmented")]
    conditioning: ConditioningArg,

    /// Condition the generator on simulated reconstructions instead of a
    /// trained reconstructor.
    #[arg(long, global = true)]
    simulator: bool,

    /// Continue a partially finished stage from its last checkpoint.
    #[arg(long, global = true)]
    resume: bool,

    /// Delete and redo the stage even if it is complete.
    #[arg(long, global = true, conflicts_with = "resume")]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render and store the training and held-out scenes.
    GenData,
    /// Train the reconstructor with one canonicalization strategy.
    TrainRecon,
    /// Train the shape autoencoder (if needed) and the flow generator.
    TrainGen,
    /// Generate meshes for held-out scenes.
    Generate {
        /// Held-out scene index; every evaluation scene when omitted.
        #[arg(long)]
        scene: Option<usize>,
    },
    /// Score generated scenes against ground truth.
    Eval,
    /// Train all strategies and conditionings and write the comparison report.
    Ablate,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::ReadConfig {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| CliError::ParseConfig {
        path: path.to_path_buf(),
        source,
    })
}

fn run_root(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| {
            std::env::var_os(RUN_ROOT_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

fn report(outcomes: &[Outcome]) {
    for o in outcomes {
        let state = match (&o.failure, o.skipped) {
            (_, true) => "up-to-date",
            (Some(_), false) => "failed",
            (None, false) => "done",
        };
        match &o.failure {
            Some(f) => println!("{state:<10} {} ({f})", o.stage),
            None => println!("{state:<10} {}", o.stage),
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let root = run_root(cli, &cfg);
    let flags = StageFlags {
        force: cli.force,
        resume: cli.resume,
    };
    let ctx = RunContext::new(&root, &cfg, flags)?;
    log::info!("run root {}", root.display());
    let strategy: Strategy = cli.strategy.into();
    let conditioning: Conditioning = cli.conditioning.into();
    let source = if cli.simulator {
        Source::Simulator
    } else {
        Source::Reconstructor(strategy)
    };
    match &cli.command {
        Command::GenData => report(&[cmd_gen_data(&ctx)?]),
        Command::TrainRecon => report(&[cmd_train_recon(&ctx, strategy)?]),
        Command::TrainGen => report(&cmd_train_gen(&ctx, conditioning, source)?),
        Command::Generate { scene } => report(&cmd_generate(&ctx, conditioning, source, *scene)?),
        Command::Eval => report(&[cmd_eval(&ctx, conditioning, source)?]),
        Command::Ablate => {
            let (table, outcomes) = cmd_ablate(&ctx, source)?;
            report(&outcomes);
            println!("\n{}", table.markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
