//! Task distribution, HR datasets, and the batches consumed by training and
//! inference: meta-batches, contrastive triples, and self-support sets.
//!
//! Every task in a batch draws from its own stream keyed by
//! `(seed, tag, step, task)`, so batches are identical whether tasks are
//! built sequentially or in parallel.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::degradation::{self, DegradationSpec, KernelShape};
use crate::error::{Error, Result};
use crate::exec::{self, Mode};
use crate::imaging::{self, Image, PatchCoords};
use crate::nn::Tensor;
use crate::seed::{self, tag, Rng};

/// Isotropic training tasks: `sigma_g` on a discrete grid, `sigma_n`
/// continuous uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub scale: usize,
    pub kernel_size: usize,
    pub sigma_g_min: f64,
    pub sigma_g_max: f64,
    pub sigma_g_step: f64,
    pub sigma_n_min: f64,
    pub sigma_n_max: f64,
}

impl TaskDistribution {
    /// Kernel widths `0.2, 0.3, ..., s`, noise in `[0, 75]`, 15x15 kernels.
    pub fn paper(scale: usize) -> Self {
        Self {
            scale,
            kernel_size: 15,
            sigma_g_min: 0.2,
            sigma_g_max: scale as f64,
            sigma_g_step: 0.1,
            sigma_n_min: 0.0,
            sigma_n_max: 75.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_g_min > 0.0
            && self.sigma_g_max >= self.sigma_g_min
            && self.sigma_g_step > 0.0
            && self.sigma_n_min >= 0.0
            && self.sigma_n_max >= self.sigma_n_min
            && self.sigma_n_max <= 75.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid task distribution {self:?}")));
        }
        DegradationSpec::isotropic(self.sigma_g_min, self.kernel_size, self.scale, self.sigma_n_min).validate()
    }

    /// The discrete kernel widths, rounded to 1e-9 so `0.1 * 3` prints as
    /// `0.3`.
    pub fn sigma_g_grid(&self) -> Vec<f64> {
        let count = ((self.sigma_g_max - self.sigma_g_min) / self.sigma_g_step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| ((self.sigma_g_min + i as f64 * self.sigma_g_step) * 1e9).round() / 1e9)
            .collect()
    }

    /// `count` specs spread evenly along the diagonal of the distribution,
    /// from (narrowest blur, least noise) to (widest blur, most noise).
    pub fn spread(&self, count: usize) -> Vec<DegradationSpec> {
        let grid = self.sigma_g_grid();
        (0..count)
            .map(|i| {
                let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
                let sigma_g = grid[(t * (grid.len() - 1) as f64).round() as usize];
                let sigma_n = self.sigma_n_min + t * (self.sigma_n_max - self.sigma_n_min);
                DegradationSpec::isotropic(sigma_g, self.kernel_size, self.scale, sigma_n)
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> DegradationSpec {
        let grid = self.sigma_g_grid();
        let sigma_g = grid[rng.random_range(0..grid.len())];
        let sigma_n = if self.sigma_n_max > self.sigma_n_min {
            rng.random_range(self.sigma_n_min..self.sigma_n_max)
        } else {
            self.sigma_n_min
        };
        DegradationSpec::isotropic(sigma_g, self.kernel_size, self.scale, sigma_n)
    }
}

/// Where training tasks come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSource {
    /// A fresh draw for every task of every step.
    Random(TaskDistribution),
    /// Uniform choice from a pool drawn once.
    Fixed(Vec<DegradationSpec>),
}

impl TaskSource {
    /// A pool of `m` specs from `dist`, drawn from the seed's fixed-task
    /// stream.
    pub fn fixed_pool(dist: &TaskDistribution, m: usize, seed: u64) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "fixed-task mode needs at least 2 tasks for cross-task pairs, got {m}"
            )));
        }
        let mut rng = seed::stream(seed, &[tag::FIXED_TASKS]);
        Ok(TaskSource::Fixed((0..m).map(|_| dist.sample(&mut rng)).collect()))
    }

    pub fn scale(&self) -> usize {
        match self {
            TaskSource::Random(d) => d.scale,
            TaskSource::Fixed(pool) => pool[0].scale,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> DegradationSpec {
        match self {
            TaskSource::Random(d) => d.sample(rng),
            TaskSource::Fixed(pool) => pool[rng.random_range(0..pool.len())],
        }
    }

    /// A spec different from `other`.
    pub fn sample_other(&self, rng: &mut Rng, other: &DegradationSpec) -> DegradationSpec {
        loop {
            let s = self.sample(rng);
            if spec_id(&s) != spec_id(other) {
                return s;
            }
        }
    }
}

/// Stable identity of a spec: equal specs give equal ids.
pub fn spec_id(spec: &DegradationSpec) -> u64 {
    let mut path = vec![spec.kernel_size as u64, spec.scale as u64, spec.sigma_n.to_bits()];
    match spec.kernel {
        KernelShape::Isotropic { sigma_g } => path.extend([1, sigma_g.to_bits()]),
        KernelShape::Anisotropic { lambda1, lambda2, theta } => {
            path.extend([2, lambda1.to_bits(), lambda2.to_bits(), theta.to_bits()])
        }
    }
    seed::derive(0, &path)
}

/// File list with optional named splits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default)]
    pub split: BTreeMap<String, Vec<String>>,
}

/// A pool of 3-channel HR images.
#[derive(Clone, Debug)]
pub struct Dataset {
    names: Vec<String>,
    images: Vec<Image>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Dataset {
    pub fn from_images(names: Vec<String>, images: Vec<Image>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if names.len() != images.len() {
            return Err(Error::Shape(format!("{} names for {} images", names.len(), images.len())));
        }
        if let Some(i) = images.iter().position(|im| im.channels() != 3) {
            return Err(Error::Shape(format!("{} is not an RGB image", names[i])));
        }
        Ok(Self { names, images })
    }

    /// Load a PNG directory. With `manifest.json` present its `files` (or
    /// the named `split`) are used, otherwise every `*.png`, sorted by name.
    pub fn open(dir: impl AsRef<Path>, split: Option<&str>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_NAME);
        let names = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
            match split {
                Some(s) => m.split.get(s).cloned().ok_or_else(|| Error::Unknown {
                    kind: "split",
                    name: s.to_string(),
                })?,
                None => m.files,
            }
        } else {
            if let Some(s) = split {
                return Err(Error::Unknown {
                    kind: "split",
                    name: format!("{s} (no {MANIFEST_NAME} in {})", dir.display()),
                });
            }
            list_pngs(dir)?
        };
        if names.is_empty() {
            return Err(Error::InvalidArgument(format!("no images in {}", dir.display())));
        }
        let images = names
            .iter()
            .map(|n| imaging::load_png(dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(names, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    /// Crop every image to a multiple of `scale` and reflect-pad it to at
    /// least `min_side` pixels, ready for aligned patch sampling.
    pub fn prepared(&self, scale: usize, min_side: usize) -> Result<Self> {
        let images = self
            .images
            .iter()
            .map(|im| {
                let side = min_side.div_ceil(scale) * scale;
                im.reflect_pad_to(side, side).crop_to_multiple(scale)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: self.names.clone(),
            images,
        })
    }
}

pub(crate) fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    Ok(names)
}

/// `n` LR patches of one task stacked along channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    stacked: Tensor,
    n: usize,
    spec_id: Option<u64>,
}

impl SupportSet {
    pub fn new(patches: &[Tensor], spec_id: Option<u64>) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::InvalidArgument("empty support set".into()));
        }
        Ok(Self {
            stacked: Tensor::concat_channels(patches)?,
            n: patches.len(),
            spec_id,
        })
    }

    pub fn stacked(&self) -> &Tensor {
        &self.stacked
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn spec_id(&self) -> Option<u64> {
        self.spec_id
    }

    /// Patch `j` as its own tensor.
    pub fn patch(&self, j: usize) -> Tensor {
        let c = self.stacked.channels / self.n;
        let plane = self.stacked.height * self.stacked.width;
        Tensor::from_vec(
            c,
            self.stacked.height,
            self.stacked.width,
            self.stacked.data[j * c * plane..(j + 1) * c * plane].to_vec(),
        )
        .expect("slice matches shape")
    }

    pub fn patches(&self) -> Vec<Tensor> {
        (0..self.n).map(|j| self.patch(j)).collect()
    }
}

/// One task of a meta-batch: the support patches double as the LR inputs.
#[derive(Clone, Debug)]
pub struct MetaTask {
    pub spec: DegradationSpec,
    pub support: SupportSet,
    pub hr: Vec<Tensor>,
    pub lr_coords: Vec<(usize, PatchCoords)>,
}

#[derive(Clone, Debug)]
pub struct MetaBatch {
    pub tasks: Vec<MetaTask>,
}

/// `(X_i, X_i', X_j)` for one task.
#[derive(Clone, Debug)]
pub struct ContrastiveTriple {
    pub anchor: SupportSet,
    pub positive: SupportSet,
    pub negative: SupportSet,
    pub negative_spec: DegradationSpec,
}

#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub triples: Vec<ContrastiveTriple>,
}

/// Builds batches from a prepared dataset.
#[derive(Clone, Debug)]
pub struct TaskSampler<'a> {
    dataset: &'a Dataset,
    source: &'a TaskSource,
    support_size: usize,
    patch: usize,
    mode: Mode,
}

impl<'a> TaskSampler<'a> {
    /// `dataset` must already be [`Dataset::prepared`] for the source's
    /// scale and `patch * scale`.
    pub fn new(dataset: &'a Dataset, source: &'a TaskSource, support_size: usize, patch: usize) -> Result<Self> {
        if support_size == 0 || patch == 0 {
            return Err(Error::InvalidArgument(format!(
                "support size {support_size} and patch {patch} must be positive"
            )));
        }
        let s = source.scale();
        if let Some(im) = dataset
            .images()
            .iter()
            .find(|im| im.height() % s != 0 || im.width() % s != 0 || im.height() < patch * s || im.width() < patch * s)
        {
            return Err(Error::Shape(format!(
                "{}x{} HR image not prepared for scale {s} and patch {patch}",
                im.height(),
                im.width()
            )));
        }
        Ok(Self {
            dataset,
            source,
            support_size,
            patch,
            mode: Mode::default_mode(),
        })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    fn pick_images(&self, rng: &mut Rng) -> Vec<usize> {
        let (pool, n) = (self.dataset.len(), self.support_size);
        if pool >= n {
            index::sample(rng, pool, n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..pool)).collect()
        }
    }

    /// `n` aligned LR/HR pairs for `spec`. LR windows are degraded from
    /// their HR neighbourhood, which matches degrading the whole image.
    fn sample_pairs(&self, spec: &DegradationSpec, with_hr: bool, rng: &mut Rng) -> Result<(Vec<Tensor>, Vec<Tensor>, Vec<(usize, PatchCoords)>)> {
        let s = spec.scale;
        let p = self.patch;
        let mut lr = Vec::with_capacity(self.support_size);
        let mut hr = Vec::new();
        let mut coords = Vec::with_capacity(self.support_size);
        for idx in self.pick_images(rng) {
            let img = &self.dataset.images()[idx];
            let at = PatchCoords {
                top: rng.random_range(0..=img.height() / s - p),
                left: rng.random_range(0..=img.width() / s - p),
                height: p,
                width: p,
            };
            let clean = degradation::degrade_window_noiseless(img, spec, at)?;
            lr.push(Tensor::from_image(&degradation::add_awgn(&clean, spec.sigma_n, rng)?));
            if with_hr {
                let hr_at = PatchCoords {
                    top: at.top * s,
                    left: at.left * s,
                    height: p * s,
                    width: p * s,
                };
                hr.push(Tensor::from_image(&img.crop(hr_at)?));
            }
            coords.push((idx, at));
        }
        Ok((lr, hr, coords))
    }

    /// A fresh support set of `n` noisy LR patches degraded with `spec`.
    pub fn support_for(&self, spec: &DegradationSpec, rng: &mut Rng) -> Result<SupportSet> {
        let (lr, _, _) = self.sample_pairs(spec, false, rng)?;
        SupportSet::new(&lr, Some(spec_id(spec)))
    }

    /// `k` fresh tasks with `n` aligned pairs each.
    pub fn meta_batch(&self, seed: u64, step: u64, k: usize) -> Result<MetaBatch> {
        let tasks = exec::map_range_with(self.mode, k, |i| {
            let mut rng = seed::stream(seed, &[tag::META_BATCH, step, i as u64]);
            let spec = self.source.sample(&mut rng);
            let (lr, hr, lr_coords) = self.sample_pairs(&spec, true, &mut rng)?;
            Ok(MetaTask {
                spec,
                support: SupportSet::new(&lr, Some(spec_id(&spec)))?,
                hr,
                lr_coords,
            })
        });
        Ok(MetaBatch {
            tasks: tasks.into_iter().collect::<Result<_>>()?,
        })
    }

    /// Reuse each task's support as `X_i`, draw `X_i'` fresh from the same
    /// spec and `X_j` from a different one.
    pub fn contrastive_batch(&self, seed: u64, step: u64, meta: &MetaBatch) -> Result<ContrastiveBatch> {
        let triples = exec::map_with(self.mode, &meta.tasks.iter().enumerate().collect::<Vec<_>>(), |&(i, task)| {
            let mut rng = seed::stream(seed, &[tag::CONTRASTIVE, step, i as u64]);
            let positive = self.support_for(&task.spec, &mut rng)?;
            let negative_spec = self.source.sample_other(&mut rng, &task.spec);
            let negative = self.support_for(&negative_spec, &mut rng)?;
            Ok(ContrastiveTriple {
                anchor: task.support.clone(),
                positive,
                negative,
                negative_spec,
            })
        });
        Ok(ContrastiveBatch {
            triples: triples.into_iter().collect::<Result<_>>()?,
        })
    }
}

/// `n` crops of one LR image, reflect-padded if it is smaller than the patch.
pub fn build_self_support(lr: &Image, n: usize, patch: usize, rng: &mut Rng) -> Result<SupportSet> {
    let crops = imaging::random_crops(lr, n, patch, patch, rng)?;
    let patches: Vec<Tensor> = crops.iter().map(|(im, _)| Tensor::from_image(im)).collect();
    SupportSet::new(&patches, None)
}

/// Directory helper used by the CLI and tests: sorted PNG paths.
pub fn png_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    Ok(list_pngs(dir)?.into_iter().map(|n| dir.join(n)).collect())
}
