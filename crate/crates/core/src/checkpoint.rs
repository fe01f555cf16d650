//! Checkpoint directories: `manifest.json` indexes every array stored in
//! `payload.bin` (little-endian f64, row-major, concatenated).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::nn::ParamSet;
use crate::optim::{Adam, AdamConfig};
use crate::trainer::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";
const FORMAT: &str = "cmdsr-checkpoint-1";

/// Everything needed to resume training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub model: ModelState,
    pub opt_theta: Adam,
    pub opt_phi: Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub name: String,
    pub t: u64,
    pub config: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub optimizers: Vec<OptimizerEntry>,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }
}

fn groups(ckpt: &Checkpoint) -> Vec<(&'static str, &ParamSet)> {
    vec![
        ("condition", ckpt.model.condition.params()),
        ("base", ckpt.model.base.params()),
        ("modulation", ckpt.model.modulation.params()),
        ("adam.theta.m.base", &ckpt.opt_theta.m[0]),
        ("adam.theta.v.base", &ckpt.opt_theta.v[0]),
        ("adam.phi.m.condition", &ckpt.opt_phi.m[0]),
        ("adam.phi.m.modulation", &ckpt.opt_phi.m[1]),
        ("adam.phi.v.condition", &ckpt.opt_phi.v[0]),
        ("adam.phi.v.modulation", &ckpt.opt_phi.v[1]),
    ]
}

fn groups_mut(ckpt: &mut Checkpoint) -> Vec<(&'static str, &mut ParamSet)> {
    let (tm, tv) = (&mut ckpt.opt_theta.m, &mut ckpt.opt_theta.v);
    let (pm, pv) = (&mut ckpt.opt_phi.m, &mut ckpt.opt_phi.v);
    let [pm_c, pm_m] = pm.as_mut_slice() else { unreachable!("two phi sets") };
    let [pv_c, pv_m] = pv.as_mut_slice() else { unreachable!("two phi sets") };
    vec![
        ("condition", ckpt.model.condition.params_mut()),
        ("base", ckpt.model.base.params_mut()),
        ("modulation", ckpt.model.modulation.params_mut()),
        ("adam.theta.m.base", &mut tm[0]),
        ("adam.theta.v.base", &mut tv[0]),
        ("adam.phi.m.condition", pm_c),
        ("adam.phi.m.modulation", pm_m),
        ("adam.phi.v.condition", pv_c),
        ("adam.phi.v.modulation", pv_m),
    ]
}

impl Checkpoint {
    fn manifest_and_payload(&self) -> (Manifest, Vec<u8>) {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (group, set) in groups(self) {
            for p in set.iter() {
                let offset = payload.len() as u64;
                for v in &p.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    name: p.name.clone(),
                    group: group.to_string(),
                    dtype: "f64".into(),
                    shape: p.shape.clone(),
                    offset,
                    nbytes: payload.len() as u64 - offset,
                });
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            step: self.step,
            config: self.config.clone(),
            model: self.model.config.clone(),
            optimizers: vec![
                OptimizerEntry {
                    name: "theta".into(),
                    t: self.opt_theta.t,
                    config: self.opt_theta.config,
                },
                OptimizerEntry {
                    name: "phi".into(),
                    t: self.opt_phi.t,
                    config: self.opt_phi.config,
                },
            ],
            payload_bytes: payload.len() as u64,
            tensors,
        };
        (manifest, payload)
    }

    /// Write atomically: a sibling temp directory is filled, then renamed.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let (manifest, payload) = self.manifest_and_payload();
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(dir, e))?;
        let write = |file: &str, bytes: &[u8]| {
            let p = tmp.join(file);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(MANIFEST_FILE, text.as_bytes())?;
        write(PAYLOAD_FILE, &payload)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::load_inner(dir.as_ref(), None)
    }

    /// Load and insist the stored architecture equals `expected`.
    pub fn load_for(dir: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        Self::load_inner(dir.as_ref(), Some(expected))
    }

    fn load_inner(dir: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", dir.display()));
        if manifest.format != FORMAT {
            return Err(bad(format!("unknown format `{}`", manifest.format)));
        }
        if let Some(want) = expected {
            if *want != manifest.model {
                return Err(bad(format!(
                    "architecture mismatch: checkpoint holds `{}` ({:?}, {} ch, x{}, n={}), expected `{}` ({:?}, {} ch, x{}, n={})",
                    manifest.model.backbone.arch,
                    manifest.model.backbone.topology,
                    manifest.model.backbone.channels,
                    manifest.model.backbone.scale,
                    manifest.model.support_size,
                    want.backbone.arch,
                    want.backbone.topology,
                    want.backbone.channels,
                    want.backbone.scale,
                    want.support_size,
                )));
            }
        }
        let payload_path = dir.join(PAYLOAD_FILE);
        let payload = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(bad(format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let model = ModelState::new(manifest.model.clone(), 0)?;
        let opt = |name: &str| {
            manifest
                .optimizers
                .iter()
                .find(|o| o.name == name)
                .ok_or_else(|| bad(format!("missing optimizer `{name}`")))
        };
        let (ot, op) = (opt("theta")?, opt("phi")?);
        let mut opt_theta = Adam::new(ot.config, &[model.base.params()]);
        opt_theta.t = ot.t;
        let mut opt_phi = Adam::new(op.config, &[model.condition.params(), model.modulation.params()]);
        opt_phi.t = op.t;
        let mut ckpt = Checkpoint {
            step: manifest.step,
            config: manifest.config.clone(),
            model,
            opt_theta,
            opt_phi,
        };
        let mut entries = manifest.tensors.iter();
        for (group, set) in groups_mut(&mut ckpt) {
            for p in set.iter_mut() {
                let e = entries
                    .next()
                    .ok_or_else(|| bad(format!("manifest ends before {group}/{}", p.name)))?;
                if e.group != group || e.name != p.name || e.shape != p.shape || e.dtype != "f64" {
                    return Err(bad(format!(
                        "entry {}/{} {:?} does not match expected {group}/{} {:?}",
                        e.group, e.name, e.shape, p.name, p.shape
                    )));
                }
                let (start, len) = (e.offset as usize, e.nbytes as usize);
                if len != p.data.len() * 8 || start.checked_add(len).is_none_or(|end| end > payload.len()) {
                    return Err(bad(format!("entry {group}/{} has a bad byte range", p.name)));
                }
                for (v, chunk) in p.data.iter_mut().zip(payload[start..start + len].chunks_exact(8)) {
                    *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                }
            }
        }
        if entries.next().is_some() {
            return Err(bad("manifest lists more tensors than the architecture has".into()));
        }
        Ok(ckpt)
    }
}

/// Load only the model, for inference.
pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelState> {
    Ok(Checkpoint::load(dir)?.model)
}

/// Latest `step-NNNNNN` checkpoint under `run_dir/checkpoints`.
pub fn latest(run_dir: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    let root = run_dir.as_ref().join(crate::trainer::CHECKPOINT_DIR);
    if !root.exists() {
        return Ok(None);
    }
    let mut steps: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Error::io(&root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step-"))
        })
        .collect();
    steps.sort();
    Ok(steps.pop())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::ConditionWidths;
    use crate::imaging::Image;
    use crate::tasks::Dataset;
    use crate::trainer::{checkpoint_path, Trainer};

    fn config() -> TrainConfig {
        TrainConfig {
            k: 2,
            n: 2,
            patch: 8,
            t0: 2,
            scale: 2,
            total_steps: 3,
            backbone_depth: Some(1),
            backbone_channels: Some(4),
            condition_widths: ConditionWidths([4, 4, 6, 6]),
            ..TrainConfig::default()
        }
    }

    fn dataset() -> Dataset {
        let img = Image::from_fn(32, 32, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 11.0);
        Dataset::from_images(vec!["a".into()], vec![img]).unwrap()
    }

    fn trained() -> Checkpoint {
        let mut tr = Trainer::new(config(), &dataset(), None).unwrap();
        for _ in 0..2 {
            tr.train_step().unwrap();
        }
        tr.checkpoint()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = trained();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        ckpt.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, ckpt);
        loaded.save(&b).unwrap();
        for f in [MANIFEST_FILE, PAYLOAD_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        }
        assert_eq!(Manifest::read(&a).unwrap().step, 2);
        // overwriting in place works and leaves no temp directory behind
        ckpt.save(&a).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2);
    }

    #[test]
    fn manifest_indexes_the_payload() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = trained();
        ckpt.save(dir.path().join("c")).unwrap();
        let m = Manifest::read(dir.path().join("c")).unwrap();
        let mut expected_offset = 0;
        for e in &m.tensors {
            assert_eq!(e.offset, expected_offset);
            assert_eq!(e.nbytes, 8 * e.shape.iter().product::<usize>() as u64);
            expected_offset += e.nbytes;
        }
        assert_eq!(expected_offset, m.payload_bytes);
        assert!(m.tensors.iter().any(|e| e.group == "base" && e.name == "base.entry.weight"));
        assert_eq!(m.optimizers[0].t, 2);
        assert_eq!(m.optimizers[1].t, 1);
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        trained().save(&path).unwrap();
        let mut other = config();
        other.backbone = "edsr-like".into();
        let err = Checkpoint::load_for(&path, &other.model_config().unwrap()).unwrap_err();
        assert!(err.to_string().contains("architecture mismatch"), "{err}");
        assert!(Checkpoint::load_for(&path, &config().model_config().unwrap()).is_ok());
    }

    #[test]
    fn corrupt_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        trained().save(&path).unwrap();
        let p = path.join(PAYLOAD_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let ds = dataset();
        let cfg = TrainConfig { total_steps: 6, ..config() };
        let dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::new(cfg.clone(), &ds, None).unwrap();
        let mut records = Vec::new();
        for _ in 0..6 {
            records.push(full.train_step().unwrap());
        }
        let mut first = Trainer::new(cfg, &ds, None).unwrap();
        for _ in 0..3 {
            first.train_step().unwrap();
        }
        let path = checkpoint_path(dir.path(), 3);
        first.checkpoint().save(&path).unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap(), &ds, None).unwrap();
        for r in &records[3..] {
            assert_eq!(&resumed.train_step().unwrap(), r);
        }
        assert_eq!(resumed.model(), full.model());
        assert_eq!(latest(dir.path()).unwrap().unwrap(), path);
    }
}
