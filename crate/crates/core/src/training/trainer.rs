use rand::seq::SliceRandom;

use super::augment::augment;
use super::loss::{combined_loss, LossWeights};
use super::optim::{AdamW, AdamWConfig};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::Dataset;
use crate::error::{config_err, Result};
use crate::metrics::{argmax_labels, MetricsAccumulator, MetricsReport};
use crate::rng::named_rng;
use crate::tensor::{Precision, Tape, Tensor};

const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub precision: Precision,
    pub augment: bool,
    /// Seeds shuffling and augmentation.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            loss: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            precision: Precision::Double,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean combined loss over the epoch's mini-batches.
    pub train_loss: f64,
    /// Mean foreground Dice on the validation split.
    pub val_dice: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Parameters of the best validation epoch.
    pub backbone: Backbone,
    pub optimizer: AdamW,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Argmax label maps for the given samples, batched.
pub fn predict(backbone: &Backbone, dataset: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, _) = dataset.batch(chunk)?;
        let (logits, _) = backbone.infer(&images)?;
        out.extend(argmax_labels(&logits)?);
    }
    Ok(out)
}

/// Dice, IoU and HD95 of argmax predictions over `indices`.
pub fn evaluate(backbone: &Backbone, dataset: &Dataset, indices: &[usize]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(dataset.num_classes);
    let pred = predict(backbone, dataset, indices)?;
    let mut off = 0;
    for &i in indices {
        let m = &dataset.samples[i].mask;
        let n = m.labels.len();
        acc.add(&pred[off..off + n], &m.labels, m.height, m.width)?;
        off += n;
    }
    Ok(acc.report())
}

pub fn train(model: BackboneConfig, config: &TrainConfig, dataset: &Dataset) -> Result<TrainedModel> {
    train_with(model, config, dataset, |_| {})
}

/// Trains from freshly initialised parameters, keeping the parameters of
/// the epoch with the best validation Dice (earliest on ties).
pub fn train_with(
    model: BackboneConfig,
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    config.loss.validate()?;
    config.optimizer.validate()?;
    if config.batch_size == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    let splits = &dataset.splits;
    if config.epochs > 0 && (splits.train.is_empty() || splits.val.is_empty()) {
        return Err(config_err!("training needs non-empty train and validation splits"));
    }
    let mut backbone = Backbone::build(model)?;
    let mut optimizer = AdamW::new(config.optimizer, &backbone.params);
    optimizer.precision = config.precision;
    let mut best = backbone.params.clone();
    let mut best_dice = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::with_capacity(config.epochs);
    let mut shuffle_rng = named_rng(config.seed, "train.shuffle");
    let mut augment_rng = named_rng(config.seed, "train.augment");
    let mut order = splits.train.clone();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = if config.augment {
                let mut imgs = Vec::new();
                let mut labels = Vec::new();
                for &i in chunk {
                    let s = &dataset.samples[i];
                    let (img, mask) = augment(&s.image, &s.mask, &mut augment_rng)?;
                    imgs.extend(img.into_data());
                    labels.extend(mask.labels);
                }
                let mut shape = dataset.samples[chunk[0]].image.shape().to_vec();
                shape[0] = chunk.len();
                (Tensor::new(shape, imgs)?, labels)
            } else {
                dataset.batch(chunk)?
            };
            let mut tape = Tape::new();
            let bound = backbone.params.bind(&mut tape);
            let x = tape.leaf(images);
            let out = backbone.forward(&mut tape, &bound, x)?;
            let loss = combined_loss(&mut tape, out.logits, &labels, &config.loss)?;
            loss_sum += tape.value(loss).data()[0];
            batches += 1;
            tape.backward(loss)?;
            backbone.params.collect_grads(&tape, &bound)?;
            optimizer.step(&mut backbone.params)?;
            backbone.params.zero_grads();
        }
        let val_dice = evaluate(&backbone, dataset, &splits.val)?.mean_dice;
        let record = EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_dice };
        on_epoch(&record);
        history.push(record);
        if val_dice > best_dice {
            best_dice = val_dice;
            best_epoch = epoch;
            best.copy_values_from(&backbone.params)?;
        }
    }
    backbone.params.copy_values_from(&best)?;
    Ok(TrainedModel { backbone, optimizer, best_epoch, history })
}
