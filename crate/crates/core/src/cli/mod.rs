//! Command-line front end: `synth-data`, `train`, `generate`,
//! `extrapolate`, and `eval`.
//!
//! Every command is a pure function of its configuration, input files, and
//! seed. Artifacts (grids, images, reports, traces, checkpoints) are
//! byte-identical across reruns; timings go to stderr only.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{Manifest, FEATURE_CENTER};
pub use config::RunConfig;

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "panotok", version, about = "Seamless panorama generation over discrete view tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat TOML settings file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a setting, e.g. `--set steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic corpus of token grids.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train (or resume training) a model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Loss trace, one JSON object per update.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Continue from `--checkpoint` if it exists.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Decode panoramas and write grids, images, and decode stats.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// arm, lpm, or spm.
        #[arg(long)]
        regime: Option<String>,
        /// Guide generation with the view vectors of this token grid.
        #[arg(long)]
        semantic_from: Option<PathBuf>,
    },
    /// Complete a partially observed panorama.
    Extrapolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Token grid (.htg) or image (.pgm/.ppm).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Ground truth for SSIM/PSNR.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Patch columns observed from the left; defaults to half.
        #[arg(long)]
        observed_cols: Option<usize>,
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a generated set against a reference set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long)]
        fake: Option<PathBuf>,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn push<T: ToString>(set: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        set.push(format!("{key}={}", toml_string(&v.to_string())));
    }
}

fn push_path(set: &mut Vec<String>, key: &str, v: Option<PathBuf>) {
    push(set, key, v.map(|p| p.display().to_string()));
}

fn toml_string(s: &str) -> String {
    // Quote anything that is not a plain number or boolean.
    if s.parse::<f64>().is_ok() || s == "true" || s == "false" {
        s.to_string()
    } else {
        toml::Value::String(s.to_string()).to_string()
    }
}

fn load(common: Common, mut extra: Vec<String>) -> Result<RunConfig> {
    let mut set = common.set;
    push(&mut set, "seed", common.seed);
    set.append(&mut extra);
    RunConfig::load(common.config.as_deref(), &set)
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
    dispatch(cli)
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut set = Vec::new();
    match cli.command {
        Command::SynthData { common, out } => {
            push_path(&mut set, "data_dir", out);
            commands::synth_data(&load(common, set)?)
        }
        Command::Train {
            common,
            data,
            checkpoint,
            trace,
            resume,
            stop_after,
        } => {
            push_path(&mut set, "data_dir", data);
            push_path(&mut set, "checkpoint", checkpoint);
            push_path(&mut set, "trace", trace);
            push(&mut set, "stop_after", stop_after);
            if resume {
                set.push("resume=true".into());
            }
            commands::train(&load(common, set)?)
        }
        Command::Generate {
            common,
            checkpoint,
            out,
            count,
            regime,
            semantic_from,
        } => {
            push_path(&mut set, "checkpoint", checkpoint);
            push_path(&mut set, "out_dir", out);
            push(&mut set, "count", count);
            push(&mut set, "regime", regime);
            push_path(&mut set, "semantic_from", semantic_from);
            commands::generate(&load(common, set)?)
        }
        Command::Extrapolate {
            common,
            checkpoint,
            input,
            truth,
            observed_cols,
            regime,
            out,
        } => {
            push_path(&mut set, "checkpoint", checkpoint);
            push_path(&mut set, "input", input);
            push_path(&mut set, "truth", truth);
            push(&mut set, "observed_cols", observed_cols);
            push(&mut set, "regime", regime);
            push_path(&mut set, "out_dir", out);
            commands::extrapolate(&load(common, set)?)
        }
        Command::Eval {
            common,
            real,
            fake,
            report,
        } => {
            push_path(&mut set, "real_dir", real);
            push_path(&mut set, "fake_dir", fake);
            push_path(&mut set, "report", report);
            commands::eval(&load(common, set)?)
        }
    }
}

/// Process entry point: runs and maps errors to exit codes.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
