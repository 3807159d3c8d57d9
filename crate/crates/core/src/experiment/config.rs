//! Flat `key = value` experiment configuration.

use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::data::SyntheticSpec;
use crate::error::{config_err, Error, Result};
use crate::tensor::Precision;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Directory with `images/` and `masks/` PGM files.
    Directory { path: PathBuf, num_classes: usize, seed: u64 },
}

/// Everything one run or ablation needs.
///
/// `seed` drives parameter initialisation, shuffling and augmentation;
/// the dataset has its own `data-seed` so every run sees the same split.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Seeds of ablation suites.
    pub seeds: Vec<u64>,
    /// Independent runs executed at once by ablation suites.
    pub jobs: usize,
    /// Also write argmax test masks as PGM files.
    pub export_masks: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: BackboneConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            out_dir: PathBuf::from("out"),
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            jobs: 1,
            export_masks: false,
        }
    }
}

/// Every key accepted by [`ExperimentConfig::set`].
pub const KEYS: &[&str] = &[
    "stages",
    "base-channels",
    "num-classes",
    "routing",
    "position",
    "init",
    "both-order",
    "seed",
    "seeds",
    "epochs",
    "batch-size",
    "ce-weight",
    "dice-weight",
    "dice-smooth",
    "learning-rate",
    "weight-decay",
    "beta1",
    "beta2",
    "epsilon",
    "augment",
    "precision",
    "data-dir",
    "data-seed",
    "synthetic-count",
    "synthetic-size",
    "synthetic-min-shapes",
    "synthetic-max-shapes",
    "noise-std",
    "out-dir",
    "jobs",
    "export-masks",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| config_err!("{key}: cannot parse '{}'", value.trim()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        v => Err(config_err!("{key}: expected true or false, got '{v}'")),
    }
}

impl ExperimentConfig {
    fn synthetic_mut(&mut self, key: &str) -> Result<&mut SyntheticSpec> {
        match &mut self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::Directory { .. } => Err(config_err!("{key} does not apply when data-dir is set")),
        }
    }

    /// Sets one field by its kebab-case key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "seeds" => {
                self.seeds = value.split(',').map(|s| parse(key, s)).collect::<Result<_>>()?;
                if self.seeds.is_empty() {
                    return Err(config_err!("seeds must not be empty"));
                }
            }
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch-size" => self.train.batch_size = parse(key, value)?,
            "ce-weight" => self.train.loss.ce_weight = parse(key, value)?,
            "dice-weight" => self.train.loss.dice_weight = parse(key, value)?,
            "dice-smooth" => self.train.loss.dice_smooth = parse(key, value)?,
            "learning-rate" => self.train.optimizer.learning_rate = parse(key, value)?,
            "weight-decay" => self.train.optimizer.weight_decay = parse(key, value)?,
            "beta1" => self.train.optimizer.beta1 = parse(key, value)?,
            "beta2" => self.train.optimizer.beta2 = parse(key, value)?,
            "epsilon" => self.train.optimizer.epsilon = parse(key, value)?,
            "augment" => self.train.augment = parse_bool(key, value)?,
            "precision" => {
                self.train.precision = match value.trim() {
                    "single" => Precision::Single,
                    "double" => Precision::Double,
                    v => return Err(config_err!("precision: expected single or double, got '{v}'")),
                }
            }
            "out-dir" => self.out_dir = PathBuf::from(value.trim()),
            "jobs" => self.jobs = parse(key, value)?,
            "export-masks" => self.export_masks = parse_bool(key, value)?,
            "data-dir" => {
                let num_classes = self.model.num_classes;
                let seed = self.data_seed();
                self.data = DataSource::Directory { path: PathBuf::from(value.trim()), num_classes, seed };
            }
            "data-seed" => {
                let v = parse(key, value)?;
                match &mut self.data {
                    DataSource::Synthetic(s) => s.seed = v,
                    DataSource::Directory { seed, .. } => *seed = v,
                }
            }
            "synthetic-count" => self.synthetic_mut(key)?.count = parse(key, value)?,
            "synthetic-size" => {
                let v = value.trim();
                let (h, w) = match v.split_once('x') {
                    Some((h, w)) => (parse(key, h)?, parse(key, w)?),
                    None => {
                        let s = parse(key, v)?;
                        (s, s)
                    }
                };
                let spec = self.synthetic_mut(key)?;
                spec.height = h;
                spec.width = w;
            }
            "synthetic-min-shapes" => self.synthetic_mut(key)?.min_shapes = parse(key, value)?,
            "synthetic-max-shapes" => self.synthetic_mut(key)?.max_shapes = parse(key, value)?,
            "noise-std" => self.synthetic_mut(key)?.noise_std = parse(key, value)?,
            "in-channels" => return Err(config_err!("in-channels is taken from the dataset")),
            _ => {
                if !self.model.set(key, value)? {
                    return Err(config_err!("unknown key '{key}'"));
                }
                if key == "num-classes" {
                    match &mut self.data {
                        DataSource::Synthetic(s) => s.num_classes = self.model.num_classes,
                        DataSource::Directory { num_classes, .. } => *num_classes = self.model.num_classes,
                    }
                }
            }
        }
        Ok(())
    }

    fn data_seed(&self) -> u64 {
        match &self.data {
            DataSource::Synthetic(s) => s.seed,
            DataSource::Directory { seed, .. } => *seed,
        }
    }

    /// Parses config text: one `key = value` per line, `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err!("line {}: expected key = value", n + 1))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => config_err!("line {}: {m}", n + 1),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Canonical text form; `parse_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut pairs: Vec<(String, String)> = self
            .model
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| !matches!(*k, "seed" | "in-channels"))
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let mut push = |k: &str, v: String| pairs.push((k.to_string(), v));
        push("seed", self.seed.to_string());
        push("seeds", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        push("epochs", t.epochs.to_string());
        push("batch-size", t.batch_size.to_string());
        push("ce-weight", t.loss.ce_weight.to_string());
        push("dice-weight", t.loss.dice_weight.to_string());
        push("dice-smooth", t.loss.dice_smooth.to_string());
        push("learning-rate", t.optimizer.learning_rate.to_string());
        push("weight-decay", t.optimizer.weight_decay.to_string());
        push("beta1", t.optimizer.beta1.to_string());
        push("beta2", t.optimizer.beta2.to_string());
        push("epsilon", t.optimizer.epsilon.to_string());
        push("augment", t.augment.to_string());
        push("precision", if t.precision == Precision::Single { "single" } else { "double" }.to_string());
        match &self.data {
            DataSource::Synthetic(s) => {
                push("data-seed", s.seed.to_string());
                push("synthetic-count", s.count.to_string());
                push("synthetic-size", format!("{}x{}", s.height, s.width));
                push("synthetic-min-shapes", s.min_shapes.to_string());
                push("synthetic-max-shapes", s.max_shapes.to_string());
                push("noise-std", s.noise_std.to_string());
            }
            DataSource::Directory { path, seed, .. } => {
                push("data-dir", path.display().to_string());
                push("data-seed", seed.to_string());
            }
        }
        push("out-dir", self.out_dir.display().to_string());
        push("jobs", self.jobs.to_string());
        push("export-masks", self.export_masks.to_string());
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// The model and training settings of one run with `seed`.
    pub fn for_seed(&self, seed: u64) -> (BackboneConfig, TrainConfig) {
        let model = BackboneConfig { seed, ..self.model.clone() };
        let train = TrainConfig { seed, ..self.train.clone() };
        (model, train)
    }
}
