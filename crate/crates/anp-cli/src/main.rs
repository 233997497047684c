//! `anp-lab`: train models with layer-wise adversarial noise, craft attacks,
//! materialize corruption suites, and evaluate robustness metrics.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data/format error.

mod commands;
mod dataset;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use anp_core::AnpError;

#[derive(Parser)]
#[command(name = "anp-lab", version, about = "Adversarial noise propagation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct TrainOverrides {
    /// Flat key=value config file; CLI flags below override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    /// Norm order: 1, 2 or inf.
    #[arg(long)]
    p: Option<String>,
    /// Noisy-slot mask: top:4, bottom:2, single:0, pair:1+3, or 0,1,2.
    #[arg(long)]
    layer_mask: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Treat eps as an absolute per-slot budget instead of RMS-relative.
    #[arg(long)]
    eps_absolute: bool,
    /// Sum parameter gradients over the k iterations into one update.
    #[arg(long)]
    accumulate_updates: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint plus per-epoch report.
    Train {
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Master seed; module-level streams derive from it.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Dataset spec: blobs:n=..., spirals:n=..., digits:train=..,test=..,
        /// or mnist:dir=PATH,train=..,test=..
        #[arg(long, default_value = "digits:train=2000,test=500")]
        dataset: String,
        /// Architecture: lenet, or mlp:d0,d1,...,dK (must match the data).
        #[arg(long)]
        arch: Option<String>,
        /// Trainer: anp, vanilla, or adv (adv uses --attack as inner attack).
        #[arg(long, default_value = "anp")]
        trainer: String,
        /// Attack spec, e.g. pgd:eps=0.1,steps=10,alpha=0.025.
        #[arg(long)]
        attack: Option<String>,
    },
    /// Craft an adversarial set against a trained model.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "fgsm:eps=0.2")]
        attack: String,
        #[arg(long, default_value = "digits:train=2000,test=500")]
        dataset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// White-box accuracy under attack, or black-box worst case over
    /// hold-out models.
    EvalAdv {
        #[arg(long)]
        model: PathBuf,
        /// Hold-out checkpoints for black-box transfer (repeatable).
        #[arg(long)]
        holdout: Vec<PathBuf>,
        #[arg(long, default_value = "fgsm:eps=0.2")]
        attack: String,
        #[arg(long, default_value = "digits:train=2000,test=500")]
        dataset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Corruption robustness: error table, CE/mCE, relative mCE, flip rates.
    EvalCorr {
        #[arg(long)]
        model: PathBuf,
        /// Baseline checkpoint the errors are divided by.
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long, default_value = "digits:train=2000,test=500")]
        dataset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Images per kind for flip-rate sequences.
        #[arg(long, default_value_t = 50)]
        sequence_images: usize,
        /// Subtract the clean error once instead of scaled by severities.
        #[arg(long)]
        relative_clean_once: bool,
    },
    /// Structure robustness: boundary distance and noise insensitivity.
    EvalStructure {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "digits:train=2000,test=500")]
        dataset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Probe images for the boundary march.
        #[arg(long, default_value_t = 50)]
        probe_images: usize,
        /// Orthogonal probe directions (capped at the input dimension).
        #[arg(long, default_value_t = 100)]
        probe_dirs: usize,
        #[arg(long, default_value_t = 0.01)]
        probe_step: f64,
        #[arg(long, default_value_t = 10.0)]
        probe_cap: f64,
        /// l-inf constraint for the insensitivity samples.
        #[arg(long, default_value_t = 0.2)]
        insensitivity_eps: f64,
        #[arg(long, default_value_t = 50)]
        insensitivity_images: usize,
    },
    /// Sweep layer masks, training one model per mask; emits one row per
    /// mask with clean accuracy, attack accuracy and mCE.
    Ablate {
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Mask sweep: top:1..5, bottom:1..3, single:0..4, pair:1+0..6
        /// (repeatable; single values like top:3 also work).
        #[arg(long, required = true)]
        masks: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "digits:train=2000,test=500")]
        dataset: String,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, default_value = "fgsm:eps=0.2")]
        attack: String,
    },
    /// Write the corrupted test suite to disk as IDX splits plus manifest.
    Materialize {
        #[arg(long, default_value = "digits:train=2000,test=500")]
        dataset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn exit_code_for(err: &AnpError) -> u8 {
    match err {
        AnpError::Config(_) => 2,
        AnpError::Domain(_)
        | AnpError::Format(_)
        | AnpError::Numeric(_)
        | AnpError::Unsupported(_)
        | AnpError::Io(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("anp-lab: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
