//! `cmdsr`: synthesize degraded test sets, train, evaluate, restore single
//! images, and export condition features.
//!
//! Every subcommand takes `--config FILE`, a JSON object whose keys match
//! the subcommand's options. A value given as a flag wins over the same
//! key in the file; `CMDSR_SEED` is consulted only when neither sets the
//! seed. The effective values are written to `resolved-config.json` in the
//! output directory, and passing that file back as `--config` reruns the
//! same pipeline.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmdsr::degradation::Preset;
use cmdsr::imaging::ChannelMode;

use crate::config::Layered;

#[derive(Parser)]
#[command(name = "cmdsr", version, about = "Blind super-resolution with a conditional meta-network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a directory of HR PNGs into an LR test set with a manifest.
    Synth(SynthArgs),
    /// Meta-train the backbone and condition network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an HR directory under the named presets.
    Eval(EvalArgs),
    /// Super-resolve one LR image with one-step self-adaptation.
    Infer(InferArgs),
    /// Export condition features for spread-out training tasks as CSV.
    Features(FeaturesArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (falls back to the config key, then CMDSR_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of HR PNGs.
    #[arg(long)]
    hr: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// simple | middle | severe; kernel and noise flags override its fields.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    /// Isotropic Gaussian width.
    #[arg(long)]
    sigma_g: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    /// Noise level on the 0-255 scale.
    #[arg(long)]
    sigma_n: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    val_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint or run directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    /// srresnet10 | edsr-like | vdsr-like
    #[arg(long)]
    backbone: Option<String>,
    /// Tasks per meta-batch.
    #[arg(long)]
    k: Option<usize>,
    /// Support-set size.
    #[arg(long)]
    n: Option<usize>,
    /// LR patch side.
    #[arg(long)]
    patch: Option<usize>,
    /// Condition-network update period.
    #[arg(long)]
    t0: Option<u64>,
    /// Weight of the reconstruction term in the combined loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Backbone learning rate.
    #[arg(long)]
    alpha: Option<f64>,
    /// Condition-network and modulation learning rate.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Train on this many fixed tasks instead of the full distribution.
    #[arg(long)]
    fixed_tasks: Option<usize>,
    /// Train the plain backbone only.
    #[arg(long)]
    unconditional: bool,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    val_every: Option<u64>,
    #[arg(long)]
    print_every: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint or run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    hr: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated presets; all three by default.
    #[arg(long, value_delimiter = ',')]
    preset: Option<Vec<Preset>>,
    /// Must match the checkpoint when given.
    #[arg(long)]
    scale: Option<usize>,
    /// Independent self-support draws per image.
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// y | rgb
    #[arg(long)]
    channel: Option<ChannelMode>,
    /// Pixels cropped from each side before PSNR; defaults to the scale.
    #[arg(long)]
    border: Option<usize>,
    /// Skip writing SR PNGs.
    #[arg(long)]
    no_images: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// LR PNG.
    #[arg(long)]
    input: Option<PathBuf>,
    /// SR PNG; resolved-config.json goes next to it.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// HR PNGs the support sets are synthesized from.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    sets_per_task: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
}

fn layered(command: &'static str, common: &Common) -> anyhow::Result<Layered> {
    let mut l = Layered::load(command, common.config.as_deref())?;
    l.set("seed", common.seed);
    l.seed_fallback()?;
    Ok(l)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut l = layered("synth", &a.common)?;
            l.set("hr_dir", a.hr);
            l.set("out_dir", a.out);
            l.set("preset", a.preset);
            l.set("scale", a.scale);
            l.set("kernel_size", a.kernel_size);
            l.set("sigma_g", a.sigma_g);
            l.set("lambda1", a.lambda1);
            l.set("lambda2", a.lambda2);
            l.set("theta", a.theta);
            l.set("sigma_n", a.sigma_n);
            commands::synth(l)
        }
        Command::Train(a) => {
            let mut l = layered("train", &a.common)?;
            l.set("train_dir", a.train_dir);
            l.set("val_dir", a.val_dir);
            l.set("out_dir", a.out);
            l.set("resume", a.resume);
            l.set("print_every", a.print_every);
            l.set("scale", a.scale);
            l.set("backbone", a.backbone);
            l.set("k", a.k);
            l.set("n", a.n);
            l.set("patch", a.patch);
            l.set("t0", a.t0);
            l.set("lambda", a.lambda);
            l.set("alpha", a.alpha);
            l.set("beta", a.beta);
            l.set("total_steps", a.steps);
            l.set("fixed_tasks", a.fixed_tasks);
            l.set("conditional", a.unconditional.then_some(false));
            l.set("checkpoint_every", a.checkpoint_every);
            l.set("val_every", a.val_every);
            commands::train(l)
        }
        Command::Eval(a) => {
            let mut l = layered("eval", &a.common)?;
            l.set("checkpoint", a.checkpoint);
            l.set("hr_dir", a.hr);
            l.set("out_dir", a.out);
            l.set("presets", a.preset);
            l.set("scale", a.scale);
            l.set("repeats", a.repeats);
            l.set("n", a.n);
            l.set("patch", a.patch);
            l.set("channel", a.channel);
            l.set("border", a.border);
            l.set("save_images", a.no_images.then_some(false));
            commands::eval(l)
        }
        Command::Infer(a) => {
            let mut l = layered("infer", &a.common)?;
            l.set("checkpoint", a.checkpoint);
            l.set("input", a.input);
            l.set("output", a.output);
            l.set("n", a.n);
            l.set("patch", a.patch);
            commands::infer(l)
        }
        Command::Features(a) => {
            let mut l = layered("features", &a.common)?;
            l.set("checkpoint", a.checkpoint);
            l.set("data_dir", a.data_dir);
            l.set("out_dir", a.out);
            l.set("n_tasks", a.n_tasks);
            l.set("sets_per_task", a.sets_per_task);
            l.set("patch", a.patch);
            commands::features(l)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
