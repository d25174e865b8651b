//! `laest` — the command-line driver: corpus generation, training,
//! evaluation, translation, and ablation for the code-switching speech
//! model in `laest-core`.
//!
//! Every run is driven by one TOML configuration (see `config`); flags
//! override individual keys. Success exits 0; any failure prints exactly
//! one `error: ...` line to stderr and exits 1.

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use laest_cli::commands;
use laest_cli::config::{Overrides, RawConfig, RunConfig};
use laest_core::decode::StDirection;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "laest", version, about = "code-switching speech recognition + translation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand; each overrides the matching
/// configuration key.
#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply for every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (mandatory here or in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Beam width for every search.
    #[arg(long)]
    beam: Option<usize>,
    /// Translation loss weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Architecture variant, e.g. lae_st_moe_aed.
    #[arg(long)]
    variant: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Number of optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut raw = match &self.config {
            Some(path) => RawConfig::load(path)?,
            None => RawConfig::default(),
        };
        raw.apply(&Overrides {
            seed: self.seed,
            beam: self.beam,
            beta: self.beta,
            variant: self.variant.clone(),
            out: self.out.clone(),
            steps: self.steps,
        });
        raw.resolve()
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus: vocabulary, training manifest, and
    /// the three held-out manifests.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing manifests.
        #[arg(long)]
        force: bool,
    },
    /// Train a model, logging every loss component per step and writing
    /// periodic plus final checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Silence the translation decoders regardless of beta.
        #[arg(long)]
        asr_only: bool,
    },
    /// Decode every held-out manifest with and without translation
    /// rescoring and write the evaluation report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out_dir>/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Translate a manifest in one direction and score it against the
    /// reference translations.
    Translate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to translate with (default: <out_dir>/final.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Manifest to translate (default: <out_dir>/eval_cs.manifest).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Translation direction: man2en or en2man.
        #[arg(long)]
        direction: String,
    },
    /// Train the four-variant comparison grid over several seeds, plus
    /// translation-weight and per-language-depth sweeps.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds per grid cell (consecutive from the configured seed).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Skip the beta and depth sweeps; train only the variant grid.
        #[arg(long)]
        skip_sweeps: bool,
        /// Overwrite existing generated data.
        #[arg(long)]
        force: bool,
    },
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen { common, force } => {
            let rc = common.resolve()?;
            commands::cmd_gen(&rc, force)
        }
        Cmd::Train { common, asr_only } => {
            let rc = common.resolve()?;
            commands::cmd_train(&rc, asr_only)
        }
        Cmd::Eval { common, checkpoint } => {
            let rc = common.resolve()?;
            let ckpt = checkpoint.unwrap_or_else(|| rc.out_dir.join("final.ckpt"));
            commands::cmd_eval(&rc, &ckpt)
        }
        Cmd::Translate { common, checkpoint, manifest, direction } => {
            let rc = common.resolve()?;
            let ckpt = checkpoint.unwrap_or_else(|| rc.out_dir.join("final.ckpt"));
            let manifest = manifest.unwrap_or_else(|| rc.out_dir.join("eval_cs.manifest"));
            let direction = StDirection::parse(&direction).ok_or_else(|| {
                anyhow!("unknown translation direction {direction:?}; expected man2en or en2man")
            })?;
            commands::cmd_translate(&rc, &ckpt, &manifest, direction)
        }
        Cmd::Ablate { common, seeds, skip_sweeps, force } => {
            if seeds == 0 {
                return Err(anyhow!("--seeds must be at least 1"));
            }
            let rc = common.resolve()?;
            commands::cmd_ablate(&rc, seeds, skip_sweeps, force)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        // One machine-parseable line: chain the error contexts, never
        // span multiple lines.
        let msg = format!("{e:#}").replace('\n', "; ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
