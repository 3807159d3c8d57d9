//! Long-format metrics CSV.

use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 10] = ["run_id", "seed", "routing", "position", "init", "epoch", "split", "metric", "class", "value"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub routing: String,
    pub position: String,
    pub init: String,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    /// Class index, or `mean` for the foreground average.
    pub class: String,
    pub value: f64,
}

/// Writes `rows` in order under a fixed header; values use six decimals.
pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.routing.clone(),
            r.position.clone(),
            r.init.clone(),
            r.epoch.to_string(),
            r.split.clone(),
            r.metric.clone(),
            r.class.clone(),
            format!("{:.6}", r.value),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
