use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use cmdsr::checkpoint::{self, Checkpoint};
use cmdsr::degradation::{self, DegradationSpec, KernelShape, Preset};
use cmdsr::eval::{self, EvalConfig};
use cmdsr::imaging::{self, ChannelMode};
use cmdsr::seed::{self, tag};
use cmdsr::tasks::{self, Dataset};
use cmdsr::trainer::{StepRecord, TrainConfig, Trainer};

use crate::config::{self, required, Layered};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// A checkpoint directory, or a run directory whose latest checkpoint is
/// used.
fn checkpoint_dir(path: &Path) -> Result<PathBuf> {
    if path.join(checkpoint::MANIFEST_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    checkpoint::latest(path)?.with_context(|| format!("no checkpoint at or under {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dir = checkpoint_dir(path)?;
    Checkpoint::load(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir, None).with_context(|| format!("opening image directory {}", dir.display()))
}

// ---- synth ----

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub hr_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub scale: Option<usize>,
    pub kernel_size: Option<usize>,
    pub sigma_g: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub theta: Option<f64>,
    pub sigma_n: Option<f64>,
    pub seed: u64,
}

impl SynthOptions {
    /// Preset values, overridden field by field. Without a preset the
    /// kernel must be given and defaults to 15x15, noise to 0.
    pub fn spec(&self) -> Result<DegradationSpec> {
        let scale = self.scale.unwrap_or(4);
        let base = self.preset.map(|p| p.spec_at_scale(scale));
        let aniso_given = self.lambda1.is_some() || self.lambda2.is_some() || self.theta.is_some();
        let kernel = match (self.sigma_g, aniso_given) {
            (Some(_), true) => bail!("give either `sigma_g` or `lambda1`/`lambda2`/`theta`, not both"),
            (Some(sigma_g), false) => KernelShape::Isotropic { sigma_g },
            (None, true) => {
                let (b1, b2, bt) = match base.map(|b| b.kernel) {
                    Some(KernelShape::Anisotropic { lambda1, lambda2, theta }) => {
                        (Some(lambda1), Some(lambda2), Some(theta))
                    }
                    _ => (None, None, None),
                };
                KernelShape::Anisotropic {
                    lambda1: self.lambda1.or(b1).context("missing `lambda1`")?,
                    lambda2: self.lambda2.or(b2).context("missing `lambda2`")?,
                    theta: self.theta.or(bt).context("missing `theta`")?,
                }
            }
            (None, false) => match base {
                Some(b) => b.kernel,
                None => bail!("no degradation given: pass --preset or kernel parameters"),
            },
        };
        let spec = DegradationSpec {
            kernel,
            kernel_size: self.kernel_size.or(base.map(|b| b.kernel_size)).unwrap_or(15),
            scale,
            sigma_n: self.sigma_n.or(base.map(|b| b.sigma_n)).unwrap_or(0.0),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn resolve(mut self) -> Result<(Self, DegradationSpec)> {
        let spec = self.spec()?;
        self.scale = Some(spec.scale);
        self.kernel_size = Some(spec.kernel_size);
        self.sigma_n = Some(spec.sigma_n);
        match spec.kernel {
            KernelShape::Isotropic { sigma_g } => self.sigma_g = Some(sigma_g),
            KernelShape::Anisotropic { lambda1, lambda2, theta } => {
                self.lambda1 = Some(lambda1);
                self.lambda2 = Some(lambda2);
                self.theta = Some(theta);
            }
        }
        Ok((self, spec))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthEntry {
    pub hr: String,
    pub lr: String,
    pub hr_size: [usize; 2],
    pub lr_size: [usize; 2],
}

/// Written as `manifest.json`; its `files` list makes the LR directory
/// loadable as a dataset.
#[derive(Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub files: Vec<String>,
    pub preset: Option<Preset>,
    pub spec: DegradationSpec,
    pub seed: u64,
    pub hr_dir: PathBuf,
    pub images: Vec<SynthEntry>,
}

pub fn synth(layered: Layered) -> Result<()> {
    let (opts, spec) = layered.parse::<SynthOptions>()?.resolve()?;
    let hr_dir = required(&opts.hr_dir, "hr_dir", "--hr")?;
    let out_dir = required(&opts.out_dir, "out_dir", "--out")?;
    if out_dir.exists() && fs::canonicalize(&out_dir)? == fs::canonicalize(&hr_dir)? {
        bail!("output directory must differ from the HR directory");
    }
    let ds = open_dataset(&hr_dir)?;
    config::write_resolved(&out_dir, "synth", &opts)?;
    let id = tasks::spec_id(&spec);
    let mut images = Vec::new();
    for (i, (name, img)) in ds.names().iter().zip(ds.images()).enumerate() {
        let hr = img.crop_to_multiple(spec.scale)?;
        let mut rng = seed::stream(opts.seed, &[tag::EVAL_NOISE, i as u64, id]);
        let lr = degradation::degrade(&hr, &spec, &mut rng)?;
        let lr_name = Path::new(name).with_extension("png").to_string_lossy().into_owned();
        let path = out_dir.join(&lr_name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        imaging::save_png(&lr, &path)?;
        images.push(SynthEntry {
            hr: name.clone(),
            lr: lr_name,
            hr_size: [hr.height(), hr.width()],
            lr_size: [lr.height(), lr.width()],
        });
    }
    let manifest = SynthManifest {
        files: images.iter().map(|e| e.lr.clone()).collect(),
        preset: opts.preset,
        spec,
        seed: opts.seed,
        hr_dir,
        images,
    };
    write_json(&out_dir.join(tasks::MANIFEST_NAME), &manifest)?;
    println!("wrote {} LR images to {}", manifest.files.len(), out_dir.display());
    Ok(())
}

// ---- train ----

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPaths {
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint (or run directory) to continue from.
    pub resume: Option<PathBuf>,
    /// Print every n-th step; condition and validation steps always print.
    pub print_every: Option<u64>,
}

pub const TRAIN_PATH_KEYS: [&str; 5] = ["train_dir", "val_dir", "out_dir", "resume", "print_every"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.5}"))
}

fn print_record(r: &StepRecord) {
    println!(
        "step {:>7}  l_res {:.5}  l_con {:>8}  l_com {:>8}  val_psnr {}",
        r.step,
        r.l_res,
        opt(r.l_con),
        opt(r.l_com),
        r.val_psnr.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
    );
}

pub fn train(mut layered: Layered) -> Result<()> {
    let paths: TrainPaths = config::parse_map("train", layered.split_off(&TRAIN_PATH_KEYS))?;
    let cfg: TrainConfig = layered.parse()?;
    cfg.validate()?;
    let train_dir = required(&paths.train_dir, "train_dir", "--train-dir")?;
    let out_dir = required(&paths.out_dir, "out_dir", "--out")?;
    let mut resolved = match serde_json::to_value(&cfg)? {
        Value::Object(m) => m,
        _ => unreachable!(),
    };
    if let Value::Object(p) = serde_json::to_value(&paths)? {
        resolved.extend(p);
    }
    config::write_resolved(&out_dir, "train", &resolved)?;

    println!(
        "k={} n={} t0={} lambda={} alpha={} beta={} scale={} steps={} backbone={} conditional={} fixed_tasks={} seed={}",
        cfg.k,
        cfg.n,
        cfg.t0,
        cfg.lambda,
        cfg.alpha,
        cfg.beta,
        cfg.scale,
        cfg.total_steps,
        cfg.backbone,
        cfg.conditional,
        cfg.fixed_tasks.map_or_else(|| "off".into(), |m| m.to_string()),
        cfg.seed
    );
    let train_ds = open_dataset(&train_dir)?;
    let val_ds = paths.val_dir.as_deref().map(open_dataset).transpose()?;
    let mut trainer = match &paths.resume {
        None => Trainer::new(cfg.clone(), &train_ds, val_ds.as_ref())?,
        Some(p) => {
            let mut ckpt = load_checkpoint(p)?;
            let mut expected = cfg.clone();
            expected.total_steps = ckpt.config.total_steps;
            if expected != ckpt.config {
                bail!("checkpoint {} was trained with a different config", p.display());
            }
            ckpt.config.total_steps = cfg.total_steps;
            println!("resuming from step {}", ckpt.step);
            Trainer::from_checkpoint(ckpt, &train_ds, val_ds.as_ref())?
        }
    };
    let every = paths.print_every.unwrap_or(1).max(1);
    let total = cfg.total_steps;
    let summary = trainer.run_with(&out_dir, |r| {
        if r.step % every == 0 || r.condition_update || r.val_psnr.is_some() || r.step == total {
            print_record(r);
        }
    })?;
    println!("final checkpoint {}", summary.final_checkpoint.display());
    Ok(())
}

// ---- eval ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub hr_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub presets: Vec<Preset>,
    pub scale: Option<usize>,
    pub repeats: usize,
    pub n: Option<usize>,
    pub patch: Option<usize>,
    pub channel: ChannelMode,
    pub border: Option<usize>,
    pub seed: u64,
    pub save_images: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            checkpoint: None,
            hr_dir: None,
            out_dir: None,
            presets: Preset::ALL.to_vec(),
            scale: None,
            repeats: 1,
            n: None,
            patch: None,
            channel: ChannelMode::Y,
            border: None,
            seed: 0,
            save_images: true,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SrEntry {
    pub image: String,
    pub preset: Preset,
    pub seed: u64,
    pub file: String,
}

/// Fill support-size, patch, and scale defaults from the checkpoint and
/// check explicit values against it.
fn support_defaults(ckpt: &Checkpoint, n: &mut Option<usize>, patch: &mut Option<usize>) -> Result<()> {
    let model_n = ckpt.model.config.support_size;
    match *n {
        Some(v) if v != model_n => bail!("`n` = {v} but the checkpoint's condition network takes {model_n} patches"),
        _ => *n = Some(model_n),
    }
    patch.get_or_insert(ckpt.config.patch);
    Ok(())
}

pub fn eval(layered: Layered) -> Result<()> {
    let mut opts: EvalOptions = layered.parse()?;
    let ckpt_path = required(&opts.checkpoint, "checkpoint", "--checkpoint")?;
    let hr_dir = required(&opts.hr_dir, "hr_dir", "--hr")?;
    let out_dir = required(&opts.out_dir, "out_dir", "--out")?;
    if opts.presets.is_empty() {
        bail!("config key `presets`: at least one preset is needed");
    }
    if opts.repeats == 0 {
        bail!("config key `repeats`: must be at least 1");
    }
    let ckpt = load_checkpoint(&ckpt_path)?;
    let s = ckpt.model.scale();
    if matches!(opts.scale, Some(v) if v != s) {
        bail!("`scale` = {} but the checkpoint is a x{s} model", opts.scale.unwrap());
    }
    opts.scale = Some(s);
    support_defaults(&ckpt, &mut opts.n, &mut opts.patch)?;
    let border = *opts.border.get_or_insert(s);
    let ds = open_dataset(&hr_dir)?;
    config::write_resolved(&out_dir, "eval", &opts)?;

    let cfg = EvalConfig {
        n: opts.n.unwrap(),
        patch: opts.patch.unwrap(),
        repeats: opts.repeats,
        border,
        channel: opts.channel,
        seed: opts.seed,
    };
    let dataset_name = hr_dir
        .file_name()
        .map_or_else(|| hr_dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let mut sr_entries = Vec::new();
    println!("{:<8} {:>10} {:>10} {:>10} {:>9}", "preset", "psnr", "psnr_rgb", "psnr_y", "max_std");
    for &preset in &opts.presets {
        let spec = preset.spec_at_scale(s);
        let sr_dir = out_dir.join("sr").join(preset.name());
        let save = opts.save_images.then_some(sr_dir.as_path());
        let (report, timing) = eval::evaluate_dataset(&ckpt.model, &ds, &dataset_name, preset.name(), &spec, &cfg, save)?;
        write_json(&out_dir.join(format!("report-{preset}.json")), &report)?;
        write_json(&out_dir.join(format!("timing-{preset}.json")), &timing)?;
        if opts.save_images {
            for name in ds.names() {
                let stem = Path::new(name).file_stem().map_or_else(|| name.clone(), |s| s.to_string_lossy().into_owned());
                sr_entries.push(SrEntry {
                    image: name.clone(),
                    preset,
                    seed: opts.seed,
                    file: format!("{}/{stem}_{preset}_s{}.png", preset.name(), opts.seed),
                });
            }
        }
        println!(
            "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>9.4}",
            preset.name(),
            report.mean_psnr,
            report.mean_psnr_rgb,
            report.mean_psnr_y,
            report.max_std
        );
    }
    if opts.save_images {
        write_json(&out_dir.join("sr").join("manifest.json"), &sr_entries)?;
    }
    Ok(())
}

// ---- infer ----

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub n: Option<usize>,
    pub patch: Option<usize>,
    pub seed: u64,
}

pub fn infer(layered: Layered) -> Result<()> {
    let mut opts: InferOptions = layered.parse()?;
    let ckpt_path = required(&opts.checkpoint, "checkpoint", "--checkpoint")?;
    let input = required(&opts.input, "input", "--input")?;
    let output = required(&opts.output, "output", "--output")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    support_defaults(&ckpt, &mut opts.n, &mut opts.patch)?;
    let lr = imaging::load_png(&input)?;
    let out_dir = output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    config::write_resolved(out_dir, "infer", &opts)?;
    let mut rng = seed::stream(opts.seed, &[tag::EVAL_SUPPORT]);
    let sr = eval::super_resolve(&ckpt.model, &lr, opts.n.unwrap(), opts.patch.unwrap(), &mut rng)?;
    imaging::save_png(&sr, &output)?;
    println!("{}x{} -> {}x{} {}", lr.height(), lr.width(), sr.height(), sr.width(), output.display());
    Ok(())
}

// ---- features ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesOptions {
    pub checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub n_tasks: usize,
    pub sets_per_task: usize,
    pub patch: Option<usize>,
    pub seed: u64,
}

impl Default for FeaturesOptions {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data_dir: None,
            out_dir: None,
            n_tasks: 8,
            sets_per_task: 400,
            patch: None,
            seed: 0,
        }
    }
}

pub const FEATURES_RAW: &str = "features_raw.csv";
pub const FEATURES_MODULATED: &str = "features_modulated.csv";
pub const FEATURE_TASKS: &str = "tasks.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureTask {
    pub task_id: usize,
    pub spec: DegradationSpec,
}

pub fn features(layered: Layered) -> Result<()> {
    let mut opts: FeaturesOptions = layered.parse()?;
    let ckpt_path = required(&opts.checkpoint, "checkpoint", "--checkpoint")?;
    let data_dir = required(&opts.data_dir, "data_dir", "--data-dir")?;
    let out_dir = required(&opts.out_dir, "out_dir", "--out")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let patch = *opts.patch.get_or_insert(ckpt.config.patch);
    let ds = open_dataset(&data_dir)?;
    config::write_resolved(&out_dir, "features", &opts)?;
    let specs = ckpt.config.task_distribution().spread(opts.n_tasks);
    let table = eval::export_condition_features(&ckpt.model, &specs, opts.sets_per_task, &ds, patch, opts.seed)?;
    table.write(&out_dir.join(FEATURES_RAW), &out_dir.join(FEATURES_MODULATED))?;
    let tasks: Vec<_> = specs
        .into_iter()
        .enumerate()
        .map(|(task_id, spec)| FeatureTask { task_id, spec })
        .collect();
    write_json(&out_dir.join(FEATURE_TASKS), &tasks)?;
    println!("wrote {} rows to {}", table.raw.len(), out_dir.display());
    Ok(())
}
