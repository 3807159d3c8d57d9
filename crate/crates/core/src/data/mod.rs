//! Datasets, image and mask files, checkpoints and CSV output.

mod checkpoint;
mod pgm;
mod report;
mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pgm::{load_pgm, parse_pgm, save_pgm, write_pgm};
pub use report::{write_metrics_csv, MetricsRow, METRICS_HEADER};
pub use synthetic::{generate_synthetic, SyntheticSpec, CLASS_INTENSITY};

use crate::error::{shape_err, Error, Result};
use crate::rng::named_rng;
use crate::tensor::Tensor;

/// Integer class map `[H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!("label map {height}x{width} with {} labels", labels.len()));
        }
        Ok(Self { height, width, labels })
    }

    /// Pixel count per class for classes `0..num_classes`.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                h[l] += 1;
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, C, H, W]`
    pub image: Tensor,
    pub mask: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded 8:1:1 partition of `0..n`.
    pub fn eight_one_one(n: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut named_rng(seed, "split"));
        let n_val = (n as f64 * 0.1).round() as usize;
        let n_test = (n as f64 * 0.1).round() as usize;
        let n_train = n - n_val - n_test;
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Self { train: idx, val, test }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic(SyntheticSpec),
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub splits: Splits,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn in_channels(&self) -> usize {
        self.samples.first().map_or(1, |s| s.image.shape()[1])
    }

    /// Stacks samples into `[B, C, H, W]` images and flat `[B·H·W]` labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let first = &self.samples[*indices.first().ok_or_else(|| shape_err!("empty batch"))?];
        let [_, c, h, w] = first.image.dims4()?;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let s = &self.samples[i];
            if s.image.shape() != first.image.shape() {
                return Err(shape_err!("sample {i} has shape {:?}, expected {:?}", s.image.shape(), first.image.shape()));
            }
            data.extend_from_slice(s.image.data());
            labels.extend_from_slice(&s.mask.labels);
        }
        Ok((Tensor::new([indices.len(), c, h, w], data)?, labels))
    }

    /// Loads `images/*.pgm` with same-named label masks from `masks/`.
    /// Intensities are scaled by 1/255; mask values are class ids.
    pub fn from_directory(dir: &Path, num_classes: usize, seed: u64) -> Result<Self> {
        let img_dir = dir.join("images");
        let mut names: Vec<PathBuf> = std::fs::read_dir(&img_dir)
            .map_err(|e| Error::io(&img_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Data(format!("no .pgm images in {}", img_dir.display())));
        }
        let mut samples = Vec::with_capacity(names.len());
        for path in &names {
            let img = load_pgm(path)?;
            let mask_path = dir.join("masks").join(path.file_name().expect("listed file"));
            let mask = load_pgm(&mask_path)?;
            if img.shape() != mask.shape() {
                return Err(shape_err!("{} and its mask differ in size", path.display()));
            }
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let labels: Vec<usize> = mask.data().iter().map(|&v| v as usize).collect();
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Data(format!("{} has label {bad} >= {num_classes}", mask_path.display())));
            }
            let image = Tensor::new([1, 1, h, w], img.data().iter().map(|v| v / 255.0).collect())?;
            samples.push(Sample { image, mask: LabelMap::new(h, w, labels)? });
        }
        let splits = Splits::eight_one_one(samples.len(), seed);
        Ok(Self { samples, splits, num_classes, provenance: Provenance::Directory(dir.to_path_buf()) })
    }
}
