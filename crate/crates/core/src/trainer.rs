//! Alternating optimization: the backbone is updated from the reconstruction
//! loss at every step, ConditionNet and the modulation maps from the
//! combined loss every `t0` steps with the backbone frozen.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BaseNet};
use crate::checkpoint::Checkpoint;
use crate::condition::ConditionWidths;
use crate::degradation;
use crate::error::{Error, Result};
use crate::exec::{self, Mode};
use crate::imaging::{self, ChannelMode, Image};
use crate::losses;
use crate::model::{ModelConfig, ModelState};
use crate::nn::{ParamSet, Tensor};
use crate::optim::{self, Adam, AdamConfig};
use crate::seed::{self, tag};
use crate::tasks::{self, ContrastiveBatch, Dataset, MetaBatch, MetaTask, TaskDistribution, TaskSampler, TaskSource};

/// Training hyperparameters. Every field has a default, so a config file
/// only needs the keys it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub n: usize,
    pub patch: usize,
    pub t0: u64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub scale: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub lr_decay: bool,
    /// Global gradient-norm bound per partition; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// `false` trains the plain backbone only (the unconditional baseline).
    pub conditional: bool,
    /// Train on a pool of this many tasks drawn once instead of fresh ones.
    pub fixed_tasks: Option<usize>,
    pub backbone: String,
    pub backbone_depth: Option<usize>,
    pub backbone_channels: Option<usize>,
    pub condition_widths: ConditionWidths,
    /// Defaults to the isotropic grid for `scale` when absent.
    pub tasks: Option<TaskDistribution>,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// 0 disables validation.
    pub val_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 8,
            n: 20,
            patch: 48,
            t0: 10,
            lambda: 0.1,
            alpha: 1e-3,
            beta: 1e-4,
            scale: 4,
            total_steps: 1000,
            seed: 0,
            adam: AdamConfig::default(),
            lr_decay: true,
            clip_norm: Some(10.0),
            conditional: true,
            fixed_tasks: None,
            backbone: "srresnet10".into(),
            backbone_depth: None,
            backbone_channels: None,
            condition_widths: ConditionWidths::default(),
            tasks: None,
            checkpoint_every: 0,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::InvalidArgument(format!("config key `{key}`: {why}")));
        if self.k == 0 {
            return bad("k", "must be at least 1");
        }
        if self.n == 0 {
            return bad("n", "must be at least 1");
        }
        if self.patch < 4 {
            return bad("patch", "must be at least 4");
        }
        if self.t0 == 0 {
            return bad("t0", "must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", "must be non-negative");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha", "must be positive");
        }
        if !(self.beta > 0.0) {
            return bad("beta", "must be positive");
        }
        if !(2..=4).contains(&self.scale) {
            return bad("scale", "must be 2, 3, or 4");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm", "must be positive");
        }
        if matches!(self.fixed_tasks, Some(m) if m < 2) {
            return bad("fixed_tasks", "needs at least 2 tasks");
        }
        let dist = self.task_distribution();
        if dist.scale != self.scale {
            return bad("tasks.scale", "must equal `scale`");
        }
        dist.validate()
            .or_else(|e| bad("tasks", &e.to_string()))?;
        self.backbone_config().map(|_| ())
    }

    pub fn task_distribution(&self) -> TaskDistribution {
        self.tasks.clone().unwrap_or_else(|| TaskDistribution::paper(self.scale))
    }

    pub fn task_source(&self) -> Result<TaskSource> {
        let dist = self.task_distribution();
        match self.fixed_tasks {
            Some(m) => TaskSource::fixed_pool(&dist, m, self.seed),
            None => Ok(TaskSource::Random(dist)),
        }
    }

    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        BackboneConfig::from_registry(&self.backbone, self.scale)?.with_size(self.backbone_depth, self.backbone_channels)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            backbone: self.backbone_config()?,
            support_size: self.n,
            condition_widths: self.condition_widths,
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_res: f64,
    pub l_inner: Option<f64>,
    pub l_cross: Option<f64>,
    pub l_con: Option<f64>,
    pub l_com: Option<f64>,
    pub lr_alpha: f64,
    pub lr_beta: f64,
    pub clipped: bool,
    pub condition_update: bool,
    pub val_psnr: Option<f64>,
}

pub const LOG_NAME: &str = "train.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Checkpoint directory for `step` under a run's output directory.
pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step-{step:06}"))
}

struct ValPair {
    hr: Image,
    lr: Image,
}

pub struct Trainer {
    config: TrainConfig,
    model: ModelState,
    opt_theta: Adam,
    opt_phi: Adam,
    step: u64,
    source: TaskSource,
    train: Dataset,
    val: Vec<ValPair>,
    mode: Mode,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<Self> {
        config.validate()?;
        let model = ModelState::new(config.model_config()?, config.seed)?;
        let opt_theta = Adam::new(config.adam, &[model.base.params()]);
        let opt_phi = Adam::new(config.adam, &[model.condition.params(), model.modulation.params()]);
        Self::assemble(config, model, opt_theta, opt_phi, 0, train, val)
    }

    /// Continue a run exactly where `ckpt` stopped.
    pub fn from_checkpoint(ckpt: Checkpoint, train: &Dataset, val: Option<&Dataset>) -> Result<Self> {
        ckpt.config.validate()?;
        Self::assemble(ckpt.config, ckpt.model, ckpt.opt_theta, ckpt.opt_phi, ckpt.step, train, val)
    }

    fn assemble(
        config: TrainConfig,
        model: ModelState,
        opt_theta: Adam,
        opt_phi: Adam,
        step: u64,
        train: &Dataset,
        val: Option<&Dataset>,
    ) -> Result<Self> {
        let s = config.scale;
        let source = config.task_source()?;
        let train = train.prepared(s, config.patch * s)?;
        let val = match val {
            Some(ds) => validation_pairs(ds, &config)?,
            None => Vec::new(),
        };
        Ok(Self {
            config,
            model,
            opt_theta,
            opt_phi,
            step,
            source,
            train,
            val,
            mode: Mode::default_mode(),
        })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Number of (backbone, condition) optimizer updates applied so far.
    pub fn update_counts(&self) -> (u64, u64) {
        (self.opt_theta.t, self.opt_phi.t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            model: self.model.clone(),
            opt_theta: self.opt_theta.clone(),
            opt_phi: self.opt_phi.clone(),
        }
    }

    fn sampler(&self) -> Result<TaskSampler<'_>> {
        Ok(TaskSampler::new(&self.train, &self.source, self.config.n, self.config.patch)?.with_mode(self.mode))
    }

    /// Build the step's meta-batch (exposed for benchmarks).
    pub fn meta_batch(&self, step: u64) -> Result<MetaBatch> {
        self.sampler()?.meta_batch(self.config.seed, step, self.config.k)
    }

    /// Contrastive triples for the condition update at `step`.
    pub fn contrastive_batch(&self, step: u64, meta: &MetaBatch) -> Result<ContrastiveBatch> {
        self.sampler()?.contrastive_batch(self.config.seed, step, meta)
    }

    /// Mean reconstruction loss over `meta` and its gradient w.r.t. the
    /// backbone parameters.
    pub fn backbone_gradient(&self, meta: &MetaBatch) -> Result<(f64, ParamSet)> {
        let k = meta.tasks.len() as f64;
        let model = &self.model;
        let conditional = self.config.conditional;
        let per_task = exec::map_with(self.mode, &meta.tasks, |task| -> Result<(f64, ParamSet)> {
            if conditional {
                let adapted = model.adapt(&task.support)?;
                let mut g = model.base.params().zeros_like();
                let l = reconstruction(adapted.net(), task, 1.0 / k, &mut g)?;
                Ok((l, adapted.pullback(&model.base, &g).0))
            } else {
                let mut g = model.base.params().zeros_like();
                let l = reconstruction(&model.base, task, 1.0 / k, &mut g)?;
                Ok((l, g))
            }
        });
        let mut grads = self.model.base.params().zeros_like();
        let mut loss = 0.0;
        for r in per_task {
            let (l, g) = r?;
            loss += l / k;
            grads.axpy(1.0, &g);
        }
        Ok((loss, grads))
    }

    /// Combined-loss statistics and gradients for ConditionNet and the
    /// modulation maps, backbone frozen.
    pub fn condition_gradient(&self, meta: &MetaBatch, cb: &ContrastiveBatch) -> Result<(ConditionStats, ParamSet, ParamSet)> {
        let k = meta.tasks.len() as f64;
        let model = &self.model;
        let lambda = self.config.lambda;
        let items: Vec<_> = meta.tasks.iter().zip(&cb.triples).collect();
        let per_task = exec::map_with(self.mode, &items, |(task, triple)| -> Result<(ConditionStats, ParamSet, ParamSet)> {
            let cond = &model.condition;
            let (fa, ca) = cond.forward(triple.anchor.stacked())?;
            let (fp, cp) = cond.forward(triple.positive.stacked())?;
            let (fneg, cn) = cond.forward(triple.negative.stacked())?;
            let l_inner = losses::inner_task_loss(fa.as_slice(), fp.as_slice())?;
            let l_cross = losses::cross_task_loss(fa.as_slice(), fneg.as_slice())?;
            let l_con = losses::task_contrastive_loss(l_inner, l_cross);
            let (d_inner, d_cross) = losses::task_contrastive_grad(l_inner, l_cross);
            let diff_p = losses::squared_distance_grad(fa.as_slice(), fp.as_slice());
            let diff_n = losses::squared_distance_grad(fa.as_slice(), fneg.as_slice());
            let mut g_fa: Vec<f64> = diff_p.iter().zip(&diff_n).map(|(p, n)| d_inner * p + d_cross * n).collect();
            let g_fp: Vec<f64> = diff_p.iter().map(|p| -d_inner * p / k).collect();
            let g_fn: Vec<f64> = diff_n.iter().map(|n| -d_cross * n / k).collect();
            g_fa.iter_mut().for_each(|v| *v /= k);
            let mut g_mod = model.modulation.params().zeros_like();
            let l_res = if lambda > 0.0 {
                let coeffs = model.modulation.coefficients(&fa)?;
                let adapted = model.base.adapt(&coeffs)?;
                let mut g_adapted = model.base.params().zeros_like();
                let l = reconstruction(adapted.net(), task, lambda / k, &mut g_adapted)?;
                let (_, g_coeffs) = adapted.pullback(&model.base, &g_adapted);
                let g_f = model.modulation.backward(&fa, &g_coeffs, &mut g_mod);
                g_fa.iter_mut().zip(&g_f).for_each(|(a, b)| *a += b);
                l
            } else {
                0.0
            };
            let mut g_phi = cond.params().zeros_like();
            cond.backward(&ca, &g_fa, &mut g_phi, false);
            cond.backward(&cp, &g_fp, &mut g_phi, false);
            cond.backward(&cn, &g_fn, &mut g_phi, false);
            Ok((
                ConditionStats {
                    l_inner,
                    l_cross,
                    l_con,
                    l_res,
                },
                g_phi,
                g_mod,
            ))
        });
        let mut total = ConditionStats::default();
        let mut g_phi = self.model.condition.params().zeros_like();
        let mut g_mod = self.model.modulation.params().zeros_like();
        for r in per_task {
            let (s, gp, gm) = r?;
            total.l_inner += s.l_inner / k;
            total.l_cross += s.l_cross / k;
            total.l_con += s.l_con / k;
            total.l_res += s.l_res / k;
            g_phi.axpy(1.0, &gp);
            g_mod.axpy(1.0, &gm);
        }
        Ok((total, g_phi, g_mod))
    }

    /// Run one full step: backbone update, then the condition update when
    /// the step is a multiple of `t0`.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let t = self.step + 1;
        let cfg = self.config.clone();
        let lr_alpha = optim::decayed_lr(cfg.alpha, t, cfg.total_steps, cfg.lr_decay);
        let lr_beta = optim::decayed_lr(cfg.beta, t, cfg.total_steps, cfg.lr_decay);
        let meta = self.meta_batch(t)?;

        let (l_res, mut g_theta) = self.backbone_gradient(&meta)?;
        if !l_res.is_finite() || !g_theta.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                detail: format!("backbone step: l_res = {l_res}"),
            });
        }
        let mut clipped = false;
        if let Some(c) = cfg.clip_norm {
            clipped |= optim::clip_global_norm(&mut [&mut g_theta], c).1;
        }
        self.opt_theta.step(lr_alpha, &mut [self.model.base.params_mut()], &[&g_theta])?;

        let mut record = StepRecord {
            step: t,
            l_res,
            l_inner: None,
            l_cross: None,
            l_con: None,
            l_com: None,
            lr_alpha,
            lr_beta,
            clipped,
            condition_update: false,
            val_psnr: None,
        };

        if cfg.conditional && t % cfg.t0 == 0 {
            let cb = self.contrastive_batch(t, &meta)?;
            let (stats, mut g_phi, mut g_mod) = self.condition_gradient(&meta, &cb)?;
            let l_com = losses::combined_loss(stats.l_con, stats.l_res, cfg.lambda);
            if !l_com.is_finite() || !g_phi.is_finite() || !g_mod.is_finite() {
                return Err(Error::NonFinite {
                    step: t,
                    detail: format!("condition step: l_con = {}, l_res = {}", stats.l_con, stats.l_res),
                });
            }
            if let Some(c) = cfg.clip_norm {
                record.clipped |= optim::clip_global_norm(&mut [&mut g_phi, &mut g_mod], c).1;
            }
            let ModelState {
                condition, modulation, ..
            } = &mut self.model;
            self.opt_phi
                .step(lr_beta, &mut [condition.params_mut(), modulation.params_mut()], &[&g_phi, &g_mod])?;
            record.l_inner = Some(stats.l_inner);
            record.l_cross = Some(stats.l_cross);
            record.l_con = Some(stats.l_con);
            record.l_com = Some(l_com);
            record.condition_update = true;
        }
        self.step = t;
        if cfg.val_every > 0 && t % cfg.val_every == 0 && !self.val.is_empty() {
            record.val_psnr = Some(self.validate()?);
        }
        Ok(record)
    }

    /// Mean Y-PSNR on the validation pairs with one self-support draw each.
    pub fn validate(&self) -> Result<f64> {
        let cfg = &self.config;
        let scores = exec::map_with(self.mode, &self.val.iter().enumerate().collect::<Vec<_>>(), |&(i, pair)| {
            let mut rng = seed::stream(cfg.seed, &[tag::VALIDATION, i as u64, 1]);
            let support = tasks::build_self_support(&pair.lr, cfg.n, cfg.patch, &mut rng)?;
            let sr = self.model.super_resolve_with(&support, &Tensor::from_image(&pair.lr))?;
            imaging::psnr(&sr.to_image(), &pair.hr, cfg.scale, ChannelMode::Y)
        });
        let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Train to `total_steps`, appending to `out_dir/train.jsonl` and
    /// writing checkpoints under `out_dir/checkpoints`. On failure the last
    /// good state is checkpointed before the error is returned.
    pub fn run(&mut self, out_dir: &Path) -> Result<RunSummary> {
        self.run_with(out_dir, |_| {})
    }

    /// [`Trainer::run`], calling `on_step` after each logged step.
    pub fn run_with(&mut self, out_dir: &Path, mut on_step: impl FnMut(&StepRecord)) -> Result<RunSummary> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(LOG_NAME);
        let file = if self.step == 0 {
            File::create(&log_path)
        } else {
            OpenOptions::new().create(true).append(true).open(&log_path)
        }
        .map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let mut records = Vec::new();
        if self.step == 0 && self.config.total_steps == 0 {
            self.checkpoint().save(checkpoint_path(out_dir, 0))?;
        }
        while self.step < self.config.total_steps {
            let record = match self.train_step() {
                Ok(r) => r,
                Err(e) => {
                    log.flush().map_err(|io| Error::io(&log_path, io))?;
                    self.checkpoint().save(checkpoint_path(out_dir, self.step))?;
                    return Err(e);
                }
            };
            let line = serde_json::to_string(&record).map_err(|e| Error::json(&log_path, e))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            let every = self.config.checkpoint_every;
            if (every > 0 && self.step % every == 0) || self.step == self.config.total_steps {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                self.checkpoint().save(checkpoint_path(out_dir, self.step))?;
            }
            on_step(&record);
            records.push(record);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        Ok(RunSummary {
            final_checkpoint: checkpoint_path(out_dir, self.step),
            log: log_path,
            records,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConditionStats {
    pub l_inner: f64,
    pub l_cross: f64,
    pub l_con: f64,
    pub l_res: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<StepRecord>,
}

/// Mean L1 over the task's pairs; accumulates `weight * d/dparams` into
/// `grads`.
fn reconstruction(net: &BaseNet, task: &MetaTask, weight: f64, grads: &mut ParamSet) -> Result<f64> {
    let n = task.support.len();
    let count = n * task.hr[0].data.len();
    let mut total = 0.0;
    for (j, hr) in task.hr.iter().enumerate() {
        let (sr, cache) = net.forward_cached(&task.support.patch(j))?;
        total += sr.data.iter().zip(&hr.data).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let mut g = losses::l1_grad(&sr, hr, count);
        if weight != 1.0 {
            g.scale(weight);
        }
        net.backward(&cache, &g, grads);
    }
    Ok(total / count as f64)
}

/// Validation pairs: every image degraded once with a task drawn from the
/// training distribution under the validation stream.
fn validation_pairs(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<ValPair>> {
    let dist = cfg.task_distribution();
    ds.images()
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = seed::stream(cfg.seed, &[tag::VALIDATION, i as u64, 0]);
            let hr = img.reflect_pad_to(cfg.patch * cfg.scale, cfg.patch * cfg.scale).crop_to_multiple(cfg.scale)?;
            let spec = dist.sample(&mut rng);
            let lr = degradation::degrade(&hr, &spec, &mut rng)?;
            Ok(ValPair { hr, lr })
        })
        .collect()
}

/// Train from scratch into `out_dir`.
pub fn train(config: TrainConfig, train: &Dataset, val: Option<&Dataset>, out_dir: &Path) -> Result<RunSummary> {
    Trainer::new(config, train, val)?.run(out_dir)
}
