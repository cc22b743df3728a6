use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use vstain_core::config::{Mode, RunConfig};
use vstain_core::pipeline;

/// Virtual multi-stain generation from H&E slides.
#[derive(Debug, Parser)]
#[command(name = "vstain", version)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `paths.out` and VSTAIN_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic H&E/stain slide set.
    Synth,
    /// Train the shared-encoder model bank.
    Train,
    /// Generate virtual stains for H&E slides.
    Stain {
        /// Comma-separated stain names; all trained stains when omitted.
        #[arg(long, value_delimiter = ',')]
        stains: Vec<String>,
        /// Also load discriminators and write QC reports and heatmaps.
        #[arg(long)]
        qc: bool,
        #[command(flatten)]
        slides: Slides,
    },
    /// Stain and score every tile with the discriminator confidence maps.
    Qc {
        #[arg(long, value_delimiter = ',')]
        stains: Vec<String>,
        #[command(flatten)]
        slides: Slides,
    },
    /// Compare generated stains with the held-out ground truth.
    Eval {
        #[arg(long, value_delimiter = ',')]
        stains: Vec<String>,
        /// Stitching overlap fraction in [0, 1).
        #[arg(long)]
        overlap: Option<f64>,
    },
}

#[derive(Debug, clap::Args)]
struct Slides {
    /// Input slide (PNG or TIFF); repeatable. The data directory when omitted.
    #[arg(long = "input")]
    input: Vec<PathBuf>,
    /// Stitching overlap fraction in [0, 1).
    #[arg(long)]
    overlap: Option<f64>,
    /// More input slides.
    inputs: Vec<PathBuf>,
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    let mut cfg = match RunConfig::load(cli.config.as_deref(), cli.out) {
        Ok(c) => c,
        Err(e) => return fail(e.kind(), &e.to_string(), e.exit_code() as u8),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mode = match cli.command {
        Command::Synth => Mode::Synth,
        Command::Train => Mode::Train,
        Command::Stain { stains, qc, slides } => {
            set_selection(&mut cfg, stains, slides);
            cfg.stain.qc |= qc;
            Mode::Stain
        }
        Command::Qc { stains, slides } => {
            set_selection(&mut cfg, stains, slides);
            Mode::Qc
        }
        Command::Eval { stains, overlap } => {
            set_selection(&mut cfg, stains, Slides { input: Vec::new(), overlap, inputs: Vec::new() });
            Mode::Eval
        }
    };
    match pipeline::run(mode, &cfg) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string(), e.exit_code() as u8),
    }
}

fn set_selection(cfg: &mut RunConfig, stains: Vec<String>, slides: Slides) {
    if !stains.is_empty() {
        cfg.stain.stains = stains;
    }
    let inputs: Vec<PathBuf> = slides.input.into_iter().chain(slides.inputs).collect();
    if !inputs.is_empty() {
        cfg.paths.inputs = inputs;
    }
    if let Some(o) = slides.overlap {
        cfg.stitch.overlap = o;
    }
}
