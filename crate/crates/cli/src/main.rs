//! `ltvwm`: synthesize, calibrate, attack and validate a watermarked loop.

mod artifacts;
mod config;
mod error;
mod pipeline;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::artifacts::OutDir;
use crate::config::{AttackKind, Config, NormalizationKind};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "ltvwm", version, about = "Dynamic watermarking for time-varying control loops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the plant, gains and normalization; check the assumptions.
    Synth(Common),
    /// Estimate the normalization and the false-alarm threshold.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        normalization: Option<NormalizationKind>,
    },
    /// Simulate (optionally attacked) runs and score them.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        attack: Option<AttackKind>,
        /// Attack start time in seconds.
        #[arg(long, value_name = "SECONDS")]
        attack_start: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        alpha: Option<f64>,
    },
    /// Compare the time-varying normalization against a time-invariant one.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        normalization: Option<NormalizationKind>,
    },
    /// Run the Monte Carlo validation suite.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<(Config, OutDir), CliError> {
        let mut cfg = match &self.config {
            Some(path) => config::load(path)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(runs) = self.runs {
            cfg.run.runs = runs;
        }
        cfg.validate()?;
        Ok((cfg, OutDir::create(&self.out)?))
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Synth(common) => {
            let (cfg, out) = common.load()?;
            pipeline::synth(&cfg, &out)
        }
        Command::Calibrate {
            common,
            normalization,
        } => {
            let (mut cfg, out) = common.load()?;
            if let Some(kind) = normalization {
                cfg.detector.normalization = kind;
            }
            pipeline::calibrate(&cfg, &out)
        }
        Command::Detect {
            common,
            attack,
            attack_start,
            alpha,
        } => {
            let (mut cfg, out) = common.load()?;
            if let Some(kind) = attack {
                cfg.attack.kind = kind;
            }
            if let Some(start) = attack_start {
                cfg.attack.start = start;
            }
            if let Some(alpha) = alpha {
                cfg.attack.alpha = alpha;
            }
            cfg.validate()?;
            pipeline::detect(&cfg, &out)
        }
        Command::Compare {
            common,
            normalization,
        } => {
            let (mut cfg, out) = common.load()?;
            if let Some(kind) = normalization {
                cfg.detector.normalization = kind;
            }
            pipeline::compare(&cfg, &out)
        }
        Command::Validate(common) => {
            let (cfg, out) = common.load()?;
            validate::validate(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ltvwm: {e}");
            e.exit_code()
        }
    }
}
