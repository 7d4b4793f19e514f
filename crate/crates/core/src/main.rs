use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mcanet::cli;
use mcanet::config::{parse_config, parse_flag_overrides};
use mcanet::data::SynthConfig;
use mcanet::Error;

#[derive(Parser)]
#[command(name = "mcanet", version, about = "Multi-label image classification with class-specific residual attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-label shapes dataset.
    Synth {
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; extra `--section.key value` flags override the config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--section.key VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint and print the per-class report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to evaluate; defaults to the run's test split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory for report.txt and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--section.key VALUE")]
        overrides: Vec<String>,
    },
    /// Write class activation heatmaps.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Class names to draw; defaults to the predicted classes.
        #[arg(long = "class")]
        classes: Vec<String>,
        #[arg(long, default_value = "cam")]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op and the tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn run(command: Command) -> mcanet::Result<()> {
    match command {
        Command::Synth { out, n, classes, size, seed } => {
            let config = SynthConfig::new(n, size, classes, seed);
            cli::cmd_synth(&out, &config).map(drop)
        }
        Command::Train { config, overrides } => {
            let config = parse_config(config.as_deref(), &overrides)?;
            cli::cmd_train(&config).map(drop)
        }
        Command::Eval { checkpoint, manifest, out, overrides } => {
            let overrides = parse_flag_overrides(&overrides)?;
            cli::cmd_eval(&checkpoint, manifest.as_deref(), &overrides, out.as_deref()).map(drop)
        }
        Command::Cam { checkpoint, images, classes, out } => {
            cli::cmd_cam(&checkpoint, &images, &classes, &out).map(drop)
        }
        Command::Gradcheck { tolerance } => cli::cmd_gradcheck(tolerance).map(drop),
    }
}

fn main() -> ExitCode {
    let args = match Cli::try_parse() {
        Ok(args) => args,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    err.exit_code() as u8
}
