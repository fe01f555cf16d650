//! One-step test-time adaptation, preset evaluation, and condition-feature
//! export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::degradation::{self, DegradationSpec};
use crate::error::{Error, Result};
use crate::exec::{self, Mode};
use crate::imaging::{self, ChannelMode, Image};
use crate::model::ModelState;
use crate::nn::Tensor;
use crate::seed::{self, tag, Rng};
use crate::tasks::{self, Dataset, SupportSet, TaskSampler, TaskSource};

/// Adapt to a self-support set cropped from `lr`, then restore the whole
/// image with the adapted backbone. No iterative refinement.
pub fn super_resolve(model: &ModelState, lr: &Image, n: usize, patch: usize, rng: &mut Rng) -> Result<Image> {
    let support = tasks::build_self_support(lr, n, patch, rng)?;
    super_resolve_from(model, &support, lr)
}

/// Restore `lr` with the backbone adapted to an explicit support set.
pub fn super_resolve_from(model: &ModelState, support: &SupportSet, lr: &Image) -> Result<Image> {
    if lr.channels() != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {} channels", lr.channels())));
    }
    Ok(model.super_resolve_with(support, &Tensor::from_image(lr))?.to_image())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n: usize,
    pub patch: usize,
    pub repeats: usize,
    pub border: usize,
    pub channel: ChannelMode,
    pub seed: u64,
}

/// Per-image PSNR over the self-support draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub name: String,
    pub psnr_rgb: f64,
    pub psnr_y: f64,
    pub std_rgb: f64,
    pub std_y: f64,
    pub draws_rgb: Vec<f64>,
    pub draws_y: Vec<f64>,
}

impl ImageResult {
    /// The value selected by `mode`.
    pub fn psnr(&self, mode: ChannelMode) -> f64 {
        match mode {
            ChannelMode::Rgb => self.psnr_rgb,
            ChannelMode::Y => self.psnr_y,
        }
    }

    pub fn std(&self, mode: ChannelMode) -> f64 {
        match mode {
            ChannelMode::Rgb => self.std_rgb,
            ChannelMode::Y => self.std_y,
        }
    }
}

/// Results for one (dataset, preset) pair. Timing lives in
/// [`EvalTimings`] so that reports are byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub preset: String,
    pub spec: DegradationSpec,
    pub config: EvalConfig,
    /// Mean of per-image values in the configured channel mode.
    pub mean_psnr: f64,
    pub mean_psnr_rgb: f64,
    pub mean_psnr_y: f64,
    /// Mean and max over images of the per-image std across repeats.
    pub mean_std: f64,
    pub max_std: f64,
    pub images: Vec<ImageResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTimings {
    pub seconds_per_image: Vec<f64>,
    pub total_seconds: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population std; zero for a single value.
fn std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Degrade every image of `dataset` with `spec` (one fixed noise draw per
/// image) and super-resolve it with `repeats` independent self-supports.
/// When `save_dir` is given, the first draw's SR output is written there as
/// `<stem>_<preset>_s<seed>.png`.
pub fn evaluate_dataset(
    model: &ModelState,
    dataset: &Dataset,
    dataset_name: &str,
    preset: &str,
    spec: &DegradationSpec,
    config: &EvalConfig,
    save_dir: Option<&Path>,
) -> Result<(EvalReport, EvalTimings)> {
    evaluate_dataset_with(Mode::default_mode(), model, dataset, dataset_name, preset, spec, config, save_dir)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset_with(
    mode: Mode,
    model: &ModelState,
    dataset: &Dataset,
    dataset_name: &str,
    preset: &str,
    spec: &DegradationSpec,
    config: &EvalConfig,
    save_dir: Option<&Path>,
) -> Result<(EvalReport, EvalTimings)> {
    if config.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    if spec.scale != model.scale() {
        return Err(Error::InvalidArgument(format!(
            "preset scale x{} does not match the model's x{}",
            spec.scale,
            model.scale()
        )));
    }
    spec.validate()?;
    if let Some(dir) = save_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let started = Instant::now();
    let indexed: Vec<(usize, &Image)> = dataset.images().iter().enumerate().collect();
    let results = exec::map_with(mode, &indexed, |&(i, img)| -> Result<(ImageResult, f64)> {
        let t = Instant::now();
        let hr = img.crop_to_multiple(spec.scale)?;
        let mut noise = seed::stream(config.seed, &[tag::EVAL_NOISE, i as u64, tasks::spec_id(spec)]);
        let lr = degradation::degrade(&hr, spec, &mut noise)?;
        let (mut draws_rgb, mut draws_y) = (Vec::new(), Vec::new());
        for r in 0..config.repeats {
            let mut rng = seed::stream(config.seed, &[tag::EVAL_SUPPORT, i as u64, r as u64]);
            let sr = super_resolve(model, &lr, config.n, config.patch, &mut rng)?;
            draws_rgb.push(imaging::psnr(&sr, &hr, config.border, ChannelMode::Rgb)?);
            draws_y.push(imaging::psnr(&sr, &hr, config.border, ChannelMode::Y)?);
            if r == 0 {
                if let Some(dir) = save_dir {
                    let stem = Path::new(&dataset.names()[i])
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| format!("{i}"));
                    imaging::save_png(&sr, dir.join(format!("{stem}_{preset}_s{}.png", config.seed)))?;
                }
            }
        }
        Ok((
            ImageResult {
                name: dataset.names()[i].clone(),
                psnr_rgb: mean(&draws_rgb),
                psnr_y: mean(&draws_y),
                std_rgb: std(&draws_rgb),
                std_y: std(&draws_y),
                draws_rgb,
                draws_y,
            },
            t.elapsed().as_secs_f64(),
        ))
    });
    let mut images = Vec::new();
    let mut seconds = Vec::new();
    for r in results {
        let (img, s) = r?;
        images.push(img);
        seconds.push(s);
    }
    let per = |f: fn(&ImageResult) -> f64| images.iter().map(f).collect::<Vec<_>>();
    let headline = images.iter().map(|r| r.psnr(config.channel)).collect::<Vec<_>>();
    let stds = images.iter().map(|r| r.std(config.channel)).collect::<Vec<_>>();
    let report = EvalReport {
        dataset: dataset_name.to_string(),
        preset: preset.to_string(),
        spec: *spec,
        config: config.clone(),
        mean_psnr: mean(&headline),
        mean_psnr_rgb: mean(&per(|r| r.psnr_rgb)),
        mean_psnr_y: mean(&per(|r| r.psnr_y)),
        mean_std: mean(&stds),
        max_std: stds.iter().copied().fold(0.0, f64::max),
        images,
    };
    Ok((
        report,
        EvalTimings {
            seconds_per_image: seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Raw condition vectors and first-modulation-layer outputs, one row per
/// support set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub task_ids: Vec<usize>,
    pub raw: Vec<Vec<f64>>,
    pub modulated: Vec<Vec<f64>>,
}

impl FeatureTable {
    fn csv(ids: &[usize], rows: &[Vec<f64>], prefix: &str) -> String {
        let mut out = String::from("task_id");
        if let Some(first) = rows.first() {
            for j in 0..first.len() {
                let _ = write!(out, ",{prefix}{j}");
            }
        }
        out.push('\n');
        for (id, row) in ids.iter().zip(rows) {
            let _ = write!(out, "{id}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn raw_csv(&self) -> String {
        Self::csv(&self.task_ids, &self.raw, "f")
    }

    pub fn modulated_csv(&self) -> String {
        Self::csv(&self.task_ids, &self.modulated, "m")
    }

    pub fn write(&self, raw_path: &Path, modulated_path: &Path) -> Result<()> {
        fs::write(raw_path, self.raw_csv()).map_err(|e| Error::io(raw_path, e))?;
        fs::write(modulated_path, self.modulated_csv()).map_err(|e| Error::io(modulated_path, e))
    }
}

/// Draw `sets_per_spec` support sets for every spec from `dataset` and
/// record their features. Row order is spec-major.
pub fn export_condition_features(
    model: &ModelState,
    specs: &[DegradationSpec],
    sets_per_spec: usize,
    dataset: &Dataset,
    patch: usize,
    seed: u64,
) -> Result<FeatureTable> {
    if specs.is_empty() || sets_per_spec == 0 {
        return Err(Error::InvalidArgument("need at least one spec and one set".into()));
    }
    let s = model.scale();
    if let Some(bad) = specs.iter().find(|sp| sp.scale != s) {
        return Err(Error::InvalidArgument(format!("spec scale x{} for a x{s} model", bad.scale)));
    }
    let prepared = dataset.prepared(s, patch * s)?;
    let source = TaskSource::Fixed(specs.to_vec());
    let sampler = TaskSampler::new(&prepared, &source, model.config.support_size, patch)?;
    let jobs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|t| (0..sets_per_spec).map(move |r| (t, r)))
        .collect();
    let rows = exec::map(&jobs, |&(t, r)| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = seed::stream(seed, &[tag::FEATURES, t as u64, r as u64]);
        let support = sampler.support_for(&specs[t], &mut rng)?;
        let f = model.condition_vector(&support)?;
        let m = model.modulation.layer_output(0, &f)?;
        Ok((f.0, m))
    });
    let mut table = FeatureTable {
        task_ids: Vec::with_capacity(jobs.len()),
        raw: Vec::with_capacity(jobs.len()),
        modulated: Vec::with_capacity(jobs.len()),
    };
    for (&(t, _), row) in jobs.iter().zip(rows) {
        let (f, m) = row?;
        table.task_ids.push(t);
        table.raw.push(f);
        table.modulated.push(m);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::condition::ConditionWidths;
    use crate::degradation::Preset;
    use crate::model::ModelConfig;

    fn model(scale: usize) -> ModelState {
        ModelState::new(
            ModelConfig {
                backbone: BackboneConfig::from_registry("srresnet10", scale)
                    .unwrap()
                    .with_size(Some(1), Some(4))
                    .unwrap(),
                support_size: 3,
                condition_widths: ConditionWidths([4, 4, 8, 8]),
            },
            3,
        )
        .unwrap()
    }

    /// Non-zero block output and non-trivial modulation, so the support
    /// actually changes the restoration.
    fn perturb(m: &mut ModelState) {
        for p in m.base.params_mut().iter_mut() {
            p.data.iter_mut().enumerate().for_each(|(j, v)| *v += 0.02 * ((j % 7) as f64 - 3.0));
        }
        for p in m.modulation.params_mut().iter_mut() {
            p.data.iter_mut().enumerate().for_each(|(j, v)| *v += 0.05 * (j % 3) as f64);
        }
    }

    fn image(h: usize, w: usize, phase: f64) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| 0.5 + 0.4 * ((y as f64 * 0.2 + phase).sin() * (x as f64 * 0.3 + c as f64).cos()))
    }

    fn dataset(count: usize) -> Dataset {
        Dataset::from_images(
            (0..count).map(|i| format!("img{i}.png")).collect(),
            (0..count).map(|i| image(40, 44, i as f64)).collect(),
        )
        .unwrap()
    }

    fn cfg(repeats: usize) -> EvalConfig {
        EvalConfig {
            n: 3,
            patch: 8,
            repeats,
            border: 4,
            channel: ChannelMode::Y,
            seed: 5,
        }
    }

    #[test]
    fn shape_and_determinism() {
        let m = model(4);
        let lr = image(120, 160, 0.0);
        let a = super_resolve(&m, &lr, 3, 8, &mut seed::rng(1)).unwrap();
        assert_eq!(a.shape(), (480, 640, 3));
        assert_eq!(a, super_resolve(&m, &lr, 3, 8, &mut seed::rng(1)).unwrap());
        assert_eq!(Tensor::from_image(&a), m.base.forward(&Tensor::from_image(&lr)).unwrap());
    }

    #[test]
    fn output_depends_on_support_only_through_the_feature() {
        let mut m = model(2);
        perturb(&mut m);
        let lr = image(20, 24, 0.3);
        let s1 = tasks::build_self_support(&lr, 3, 8, &mut seed::rng(1)).unwrap();
        let s2 = tasks::build_self_support(&lr, 3, 8, &mut seed::rng(2)).unwrap();
        let f1 = m.condition_vector(&s1).unwrap();
        let via_feature = m
            .base
            .adapt(&m.coefficients(&f1).unwrap())
            .unwrap()
            .forward(&Tensor::from_image(&lr))
            .unwrap()
            .to_image();
        assert_eq!(super_resolve_from(&m, &s1, &lr).unwrap(), via_feature);
        assert_ne!(super_resolve_from(&m, &s2, &lr).unwrap(), via_feature);
    }

    #[test]
    fn report_contract() {
        let m = model(4);
        let ds = dataset(5);
        let spec = Preset::Middle.spec();
        let (r, t) = evaluate_dataset(&m, &ds, "toy", "middle", &spec, &cfg(1), None).unwrap();
        assert_eq!(r.images.len(), 5);
        assert_eq!(t.seconds_per_image.len(), 5);
        assert!(r.images.iter().all(|i| i.std_y == 0.0 && i.std_rgb == 0.0));
        let m_y = r.images.iter().map(|i| i.psnr_y).sum::<f64>() / 5.0;
        assert!((r.mean_psnr - m_y).abs() < 1e-9);
        assert!((r.mean_psnr_y - m_y).abs() < 1e-9);
        let (again, _) = evaluate_dataset(&m, &ds, "toy", "middle", &spec, &cfg(1), None).unwrap();
        assert_eq!(serde_json::to_vec(&r).unwrap(), serde_json::to_vec(&again).unwrap());
        let (seq, _) = evaluate_dataset_with(Mode::Sequential, &m, &ds, "toy", "middle", &spec, &cfg(1), None).unwrap();
        assert_eq!(seq, r);
        assert!(evaluate_dataset(&m, &ds, "toy", "middle", &Preset::Middle.spec_at_scale(2), &cfg(1), None).is_err());
    }

    #[test]
    fn repeats_fill_the_stability_fields() {
        let mut m = model(2);
        perturb(&mut m);
        let ds = dataset(2);
        let dir = tempfile::tempdir().unwrap();
        let spec = Preset::Simple.spec_at_scale(2);
        let (r, _) = evaluate_dataset(&m, &ds, "toy", "simple", &spec, &cfg(4), Some(dir.path())).unwrap();
        assert!(r.images.iter().all(|i| i.draws_y.len() == 4 && i.std_y > 0.0));
        assert!(dir.path().join("img0_simple_s5.png").exists());
    }

    #[test]
    fn feature_table_rows() {
        let m = model(2);
        let ds = dataset(3);
        let specs: Vec<_> = [0.5, 1.5].iter().map(|&g| DegradationSpec::isotropic(g, 15, 2, 10.0)).collect();
        let t = export_condition_features(&m, &specs, 4, &ds, 8, 0).unwrap();
        assert_eq!(t.raw.len(), 8);
        assert_eq!(t.task_ids, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert!(t.raw.iter().all(|r| r.len() == 8));
        assert!(t.modulated.iter().all(|r| r.len() == 4));
        let one = export_condition_features(&m, &specs[..1], 1, &ds, 8, 0).unwrap();
        let csv = one.raw_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "task_id,f0,f1,f2,f3,f4,f5,f6,f7");
        assert_eq!(lines[1].split(',').count(), 9);
        assert!(one.modulated_csv().starts_with("task_id,m0,"));
    }
}
