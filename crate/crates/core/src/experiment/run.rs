//! Single training runs and their output files.

use std::io::Write;
use std::path::Path;

use super::config::{DataSource, ExperimentConfig};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{generate_synthetic, save_checkpoint, save_pgm, write_metrics_csv, Dataset, MetricsRow};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::tensor::Tensor;
use crate::training::{evaluate, predict, train_with, TrainedModel};
use crate::xattnres::{write_trace_csv, AttentionTrace};

/// Samples fed through the network when exporting attention traces.
pub const TRACE_BATCH: usize = 8;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const TRACE_FILE: &str = "attention.csv";
pub const CONFIG_FILE: &str = "config.txt";

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic(spec) => generate_synthetic(spec),
        DataSource::Directory { path, num_classes, seed } => Dataset::from_directory(path, *num_classes, *seed),
    }
}

/// Stable identifier of a run: routing, position, init and seed.
pub fn run_id(model: &BackboneConfig) -> String {
    format!("{}_{}_{}_s{}", model.routing, model.position, model.init_scheme, model.seed)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub model: TrainedModel,
    pub test: MetricsReport,
    pub rows: Vec<MetricsRow>,
    pub traces: Vec<AttentionTrace>,
}

/// Attention traces of `backbone` over the first test samples.
pub fn trace_batch(backbone: &Backbone, dataset: &Dataset) -> Result<Vec<AttentionTrace>> {
    let split = if dataset.splits.test.is_empty() { &dataset.splits.train } else { &dataset.splits.test };
    let n = split.len().min(TRACE_BATCH);
    if n == 0 {
        return Ok(Vec::new());
    }
    let (images, _) = dataset.batch(&split[..n])?;
    Ok(backbone.infer(&images)?.1)
}

fn report_rows(base: &MetricsRow, report: &MetricsReport) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for (metric, per_class, mean) in [
        ("dice", &report.per_class_dice, report.mean_dice),
        ("iou", &report.per_class_iou, report.mean_iou),
        ("hd95", &report.per_class_hd95, report.mean_hd95),
    ] {
        for (c, &v) in per_class.iter().enumerate() {
            rows.push(MetricsRow { metric: metric.into(), class: c.to_string(), value: v, ..base.clone() });
        }
        rows.push(MetricsRow { metric: metric.into(), class: "mean".into(), value: mean, ..base.clone() });
    }
    rows
}

/// Trains and evaluates one (config, seed) pair without touching the disk.
pub fn execute(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64, log: &mut dyn Write) -> Result<RunOutcome> {
    let (mut model_cfg, train_cfg) = cfg.for_seed(seed);
    model_cfg.in_channels = dataset.in_channels();
    model_cfg.num_classes = dataset.num_classes;
    let id = run_id(&model_cfg);
    let base = MetricsRow {
        run_id: id.clone(),
        seed,
        routing: model_cfg.routing.to_string(),
        position: model_cfg.position.to_string(),
        init: model_cfg.init_scheme.to_string(),
        epoch: 0,
        split: String::new(),
        metric: String::new(),
        class: "mean".into(),
        value: 0.0,
    };
    let mut rows = Vec::new();
    let model = train_with(model_cfg, &train_cfg, dataset, |r| {
        let _ = writeln!(log, "[{id}] epoch {:>3}  loss {:.4}  val dice {:.4}", r.epoch, r.train_loss, r.val_dice);
        let at = MetricsRow { epoch: r.epoch, ..base.clone() };
        rows.push(MetricsRow { split: "train".into(), metric: "loss".into(), value: r.train_loss, ..at.clone() });
        rows.push(MetricsRow { split: "val".into(), metric: "dice".into(), value: r.val_dice, ..at });
    })?;
    let test = evaluate(&model.backbone, dataset, &dataset.splits.test)?;
    let at = MetricsRow { epoch: model.best_epoch, split: "test".into(), ..base };
    rows.extend(report_rows(&at, &test));
    let traces = trace_batch(&model.backbone, dataset)?;
    Ok(RunOutcome { run_id: id, model, test, rows, traces })
}

/// Writes the metrics CSV, best checkpoint, attention traces, and the
/// effective config into `dir`.
pub fn write_outputs(cfg: &ExperimentConfig, outcome: &RunOutcome, dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(&outcome.rows, &dir.join(METRICS_FILE))?;
    save_checkpoint(&outcome.model.backbone, Some(&outcome.model.optimizer), &dir.join(CHECKPOINT_FILE))?;
    write_trace_csv(&outcome.traces, &dir.join(TRACE_FILE))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    if cfg.export_masks {
        let mask_dir = dir.join("masks");
        std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        let test = &dataset.splits.test;
        let pred = predict(&outcome.model.backbone, dataset, test)?;
        let mut off = 0;
        for &i in test {
            let m = &dataset.samples[i].mask;
            let n = m.labels.len();
            let plane = Tensor::new([m.height, m.width], pred[off..off + n].iter().map(|&l| l as f64).collect())?;
            save_pgm(&plane, &mask_dir.join(format!("{i:04}.pgm")))?;
            off += n;
        }
    }
    Ok(())
}

/// Per-class summary table of a test report.
pub fn render_report(report: &MetricsReport) -> String {
    let mut s = format!("{:<8}{:>10}{:>10}{:>10}\n", "class", "dice", "iou", "hd95");
    for c in 0..report.per_class_dice.len() {
        s += &format!(
            "{:<8}{:>10.4}{:>10.4}{:>10.3}\n",
            c, report.per_class_dice[c], report.per_class_iou[c], report.per_class_hd95[c]
        );
    }
    s += &format!("{:<8}{:>10.4}{:>10.4}{:>10.3}\n", "fg mean", report.mean_dice, report.mean_iou, report.mean_hd95);
    s += &format!(
        "empty-mask conventions applied: both empty {}, one empty {}\n",
        report.flags.both_empty, report.flags.one_empty
    );
    s
}

/// `run`: trains with `cfg.seed`, evaluates on the test split and writes
/// every output under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<RunOutcome> {
    let dataset = load_dataset(&cfg.data)?;
    let outcome = execute(cfg, &dataset, cfg.seed, log)?;
    write_outputs(cfg, &outcome, &dataset, &cfg.out_dir)?;
    let (total, overhead) = outcome.model.backbone.parameter_count();
    let _ = writeln!(
        log,
        "\nrun {}  best epoch {}  parameters {total} (xattnres {overhead})\n{}",
        outcome.run_id,
        outcome.model.best_epoch,
        render_report(&outcome.test)
    );
    Ok(outcome)
}
