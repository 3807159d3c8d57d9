//! The `inspect-routing` command: attention traces of a saved model.

use std::fmt::Write as _;
use std::path::Path;

use super::config::DataSource;
use super::run::{load_dataset, trace_batch, TRACE_FILE};
use crate::data::load_checkpoint;
use crate::error::{config_err, Error, Result};
use crate::xattnres::{write_trace_csv, AttentionTrace};

#[derive(Debug, Clone)]
pub struct RoutingInspection {
    pub traces: Vec<AttentionTrace>,
}

impl RoutingInspection {
    /// `(site, uniformity score)` in execution order.
    pub fn scores(&self) -> Vec<(String, f64)> {
        self.traces.iter().map(|t| (t.site.to_string(), t.uniformity_score())).collect()
    }

    pub fn render(&self) -> String {
        if self.traces.is_empty() {
            return "model has no XAttnRes sites\n".into();
        }
        let mut s = format!("{:<6}{:>9}{:>12}  mean weights\n", "site", "entries", "uniformity");
        for t in &self.traces {
            let weights: Vec<String> = t
                .sources
                .iter()
                .zip(t.mean_weights())
                .map(|(src, w)| format!("{}{}={w:.4}", &src.side_label()[..3], src.index()))
                .collect();
            let _ = writeln!(s, "{:<6}{:>9}{:>12.6}  {}", t.site.to_string(), t.entries(), t.uniformity_score(), weights.join(" "));
        }
        s
    }
}

/// Loads `checkpoint`, runs it over a sample batch of `data` and writes
/// `attention.csv` (all sites) and `attention_<site>.csv` into `out_dir`.
pub fn inspect_routing(checkpoint: &Path, data: &DataSource, out_dir: &Path) -> Result<RoutingInspection> {
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data)?;
    if ckpt.config.in_channels != dataset.in_channels() || ckpt.config.num_classes != dataset.num_classes {
        return Err(config_err!(
            "checkpoint expects {} input channels and {} classes, dataset has {} and {}",
            ckpt.config.in_channels,
            ckpt.config.num_classes,
            dataset.in_channels(),
            dataset.num_classes
        ));
    }
    let backbone = ckpt.restore()?;
    let traces = trace_batch(&backbone, &dataset)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_trace_csv(&traces, &out_dir.join(TRACE_FILE))?;
    for t in &traces {
        write_trace_csv(std::slice::from_ref(t), &out_dir.join(format!("attention_{}.csv", t.site)))?;
    }
    Ok(RoutingInspection { traces })
}
