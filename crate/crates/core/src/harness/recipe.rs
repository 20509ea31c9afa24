//! Training recipes for the toy models the experiments run on.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::task::{gen_task, TaskKind, TaskSpec};
use crate::engine::{train, ArchConfig, ModelCheckpoint, MultimodalSequence, Optimizer, TrainConfig};
use crate::error::{Error, Result};

/// Everything needed to reproduce a trained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub arch: ArchConfig,
    /// Tasks mixed into one training set, in this order.
    pub tasks: Vec<TaskKind>,
    pub grid_side: usize,
    pub n_colors: usize,
    /// Training samples per task.
    pub n_train: usize,
    pub n_heldout: usize,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

pub const RECIPE_PRESETS: [&str; 4] = ["default", "small", "large", "lookup"];

impl Recipe {
    /// Named recipes: `default` is 6 layers at width 64 on both tasks,
    /// `small`/`large` bracket it in capacity, `lookup` trains one task longer.
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, d, tasks, steps) = match name {
            "default" => (6, 64, vec![TaskKind::Lookup, TaskKind::Majority], 4000),
            "small" => (4, 32, vec![TaskKind::Lookup, TaskKind::Majority], 4000),
            "large" => (8, 96, vec![TaskKind::Lookup, TaskKind::Majority], 4000),
            "lookup" => (6, 64, vec![TaskKind::Lookup], 5000),
            other => {
                return Err(Error::Config(format!(
                    "unknown recipe {other:?} (expected one of {})",
                    RECIPE_PRESETS.join(", ")
                )))
            }
        };
        let grid_side = 4;
        let n_colors = 4;
        let vocab = 32;
        Ok(Self {
            name: name.to_string(),
            arch: ArchConfig::new(layers, d, 4, 2 * d, vocab, 24),
            tasks,
            grid_side,
            n_colors,
            n_train: 20_000,
            n_heldout: 1000,
            data_seed: 1,
            init_seed: 7,
            train: TrainConfig {
                steps,
                lr: 0.05,
                batch: 16,
                seed: 3,
                optimizer: Optimizer::Sgd { momentum: 0.9 },
                clip_norm: 1.0,
            },
        })
    }

    /// Same recipe with initialisation and shuffling driven by `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(7);
        self.train.seed = seed.wrapping_mul(0x85eb_ca6b).wrapping_add(3);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("a recipe needs at least one task".into()));
        }
        for &k in &self.tasks {
            let spec = self.task_spec(k);
            spec.validate()?;
            if spec.vocab().size() > self.arch.vocab_size {
                return Err(Error::Config(format!(
                    "task vocabulary {} exceeds model vocabulary {}",
                    spec.vocab().size(),
                    self.arch.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Data spec for one task; each task draws from its own seed stream.
    pub fn task_spec(&self, kind: TaskKind) -> TaskSpec {
        let offset = match kind {
            TaskKind::Lookup => 0,
            TaskKind::Majority => 1_000_003,
        };
        TaskSpec::new(
            kind,
            self.grid_side,
            self.n_colors,
            self.n_train,
            self.n_heldout,
            self.data_seed.wrapping_add(offset),
        )
    }

    pub fn training_set(&self) -> Result<Vec<MultimodalSequence>> {
        let mut out = Vec::new();
        for &k in &self.tasks {
            out.extend(gen_task(&self.task_spec(k))?.train.sequences(self.arch.d_model));
        }
        Ok(out)
    }

    pub fn heldout(&self, kind: TaskKind) -> Result<Vec<MultimodalSequence>> {
        Ok(gen_task(&self.task_spec(kind))?.heldout.sequences(self.arch.d_model))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("recipe serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let r: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    /// Hex digest of the canonical recipe text.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Trains from scratch; returns the checkpoint and loss trace.
    pub fn run(&self) -> Result<(ModelCheckpoint, Vec<f64>)> {
        self.validate()?;
        if self.train.steps == 0 {
            return Err(Error::NoTraining);
        }
        let data = self.training_set()?;
        let init = ModelCheckpoint::init(self.arch.clone(), self.init_seed)?;
        train(&init, &data, &self.train)
    }

    /// Where `run_cached` keeps this recipe's checkpoint under `dir`.
    pub fn cache_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}-{}.ckpt", self.name, self.fingerprint()))
    }

    /// Loss trace stored beside the cached checkpoint, one `step,loss` row per step.
    pub fn loss_path(&self, dir: &Path) -> PathBuf {
        self.cache_path(dir).with_extension("loss.csv")
    }

    /// Loads a previously trained checkpoint and its loss trace from `dir`,
    /// training and storing both first when either is absent.
    pub fn run_cached(&self, dir: &Path) -> Result<(ModelCheckpoint, Vec<f64>)> {
        let path = self.cache_path(dir);
        let loss_path = self.loss_path(dir);
        if path.exists() && loss_path.exists() {
            let ck = ModelCheckpoint::load(&path, Some(&self.arch))?;
            return Ok((ck, read_loss(&loss_path)?));
        }
        let (ck, trace) = self.run()?;
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let tag = format!("tmp{}", std::process::id());
        let tmp = path.with_extension(&tag);
        ck.save(&tmp)?;
        fs::rename(&tmp, &path).map_err(|e| Error::file(&path, e))?;
        let tmp = loss_path.with_extension(&tag);
        write_loss(&tmp, &trace)?;
        fs::rename(&tmp, &loss_path).map_err(|e| Error::file(&loss_path, e))?;
        Ok((ck, trace))
    }
}

pub fn write_loss(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(fs::File::create(path).map_err(|e| Error::file(path, e))?);
    w.write_record(["step", "loss"])?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn read_loss(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_reader(fs::File::open(path).map_err(|e| Error::file(path, e))?);
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec.get(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Dataset(format!("{}: bad loss row", path.display())))
        })
        .collect()
}

/// Means of consecutive `window`-step blocks; a trailing partial block is dropped.
pub fn window_means(trace: &[f64], window: usize) -> Vec<f64> {
    trace
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in RECIPE_PRESETS {
            let r = Recipe::preset(name).unwrap();
            r.validate().unwrap();
            assert_eq!(Recipe::from_toml(&r.to_toml()).unwrap(), r);
        }
        assert!(Recipe::preset("huge").is_err());
        let a = Recipe::preset("default").unwrap();
        assert_ne!(a.fingerprint(), a.clone().with_seed(1).fingerprint());
    }

    #[test]
    fn zero_steps_is_refused() {
        let mut r = Recipe::preset("small").unwrap();
        r.train.steps = 0;
        assert!(matches!(r.run(), Err(Error::NoTraining)));
    }
}
