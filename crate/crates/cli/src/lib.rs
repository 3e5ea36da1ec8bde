//! Command-line driver: one subcommand per pipeline stage.

pub mod config;
pub mod stages;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use skelfuse::train::AttentionMode;
use skelfuse::{Error, Result};

use config::Config;
use stages::Stage;

/// Tool version: crate version plus the source revision.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-g", env!("SKELFUSE_GIT_REV"));

/// Relative-error bound of `grad-check`.
pub const GRAD_TOLERANCE: f32 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "skelfuse", version = VERSION, about = "Skeleton-guided attention fusion for action recognition")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialisation and shuffling.
    #[arg(long, global = true, env = "SKELFUSE_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SKELFUSE_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    None,
    Fixed,
    Soft,
}

impl From<Mode> for AttentionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::None => AttentionMode::None,
            Mode::Fixed => AttentionMode::Fixed,
            Mode::Soft => AttentionMode::Soft,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenSynthetic,
    /// Train the skeleton network.
    TrainSkeleton,
    /// Build the region-of-interest images.
    BuildStroi,
    /// Export per-sample part weights of the trained skeleton network.
    ExtractWeights,
    /// Train the RGB network.
    TrainRgb {
        /// Attention mode; defaults to the configured one.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Print the ablation table of every trained model.
    Evaluate {
        /// Require this RGB model to be present.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Average skeleton and RGB probabilities.
    Ensemble {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Check analytic gradients against finite differences.
    GradCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic => "gen-synthetic",
            Command::TrainSkeleton => "train-skeleton",
            Command::BuildStroi => "build-stroi",
            Command::ExtractWeights => "extract-weights",
            Command::TrainRgb { .. } => "train-rgb",
            Command::Evaluate { .. } => "evaluate",
            Command::Ensemble { .. } => "ensemble",
            Command::GradCheck => "grad-check",
        }
    }
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout();
    match run(&cli, &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(cli: &Cli) -> Result<Config> {
    let base = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::from_pairs(&[])?,
    };
    base.with_overrides(cli.seed, cli.out.clone())
}

fn run(cli: &Cli, log: &mut dyn Write) -> Result<i32> {
    let cfg = resolve(cli)?;
    let header = vec![
        format!("skelfuse {VERSION}"),
        format!("command {}", cli.command.name()),
        format!("seed {}", cfg.seed),
    ];
    let echo = cfg.out.join("config").join(format!("{}.cfg", cli.command.name()));
    skelfuse::io::write_bytes(&echo, cfg.to_text(&header).as_bytes())?;
    let mode = |m: Option<Mode>| m.map_or(cfg.attention_mode, AttentionMode::from);
    let mut stage = Stage::new(&cfg, log);
    match &cli.command {
        Command::GenSynthetic => stage.gen_synthetic()?,
        Command::TrainSkeleton => stage.train_skeleton()?,
        Command::BuildStroi => stage.build_stroi()?,
        Command::ExtractWeights => stage.extract_weights()?,
        Command::TrainRgb { mode: m } => stage.train_rgb(mode(*m))?,
        Command::Evaluate { mode: m } => {
            stage.evaluate(m.map(AttentionMode::from))?;
        }
        Command::Ensemble { mode: m } => stage.ensemble(mode(*m))?,
        Command::GradCheck => {
            if !stage.grad_check(GRAD_TOLERANCE)? {
                return Ok(Error::Numeric(String::new()).exit_code());
            }
        }
    }
    Ok(0)
}

/// Run a subcommand in-process with progress written to `log`.
pub fn run_args<I, T>(argv: I, log: &mut dyn Write) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::usage(e.to_string()))?;
    run(&cli, log)
}
