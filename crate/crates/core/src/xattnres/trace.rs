use std::path::Path;

use super::{Side, StageTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a row of the value stack holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntrySource {
    History(StageTag),
    /// The site's own incoming feature, always the last entry.
    Current(StageTag),
}

impl EntrySource {
    pub fn side_label(&self) -> &'static str {
        match self {
            EntrySource::History(StageTag { side: Side::Encoder, .. }) => "encoder",
            EntrySource::History(StageTag { side: Side::Decoder, .. }) => "decoder",
            EntrySource::Current(_) => "current",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            EntrySource::History(t) | EntrySource::Current(t) => t.index,
        }
    }
}

/// Attention weights of one site for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub site: StageTag,
    pub sources: Vec<EntrySource>,
    /// `[K+1, H', W']`, averaged over the batch.
    pub weights: Tensor,
    /// `[K+1, B, H', W']`, kept only on request.
    pub per_sample: Option<Tensor>,
}

impl AttentionTrace {
    /// Builds a trace from softmax weights laid out `[K+1, B, H', W']`.
    pub fn from_weights(site: StageTag, sources: Vec<EntrySource>, alpha: &Tensor, per_sample: bool) -> Self {
        let s = alpha.shape();
        let (n, b, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let mut avg = vec![0.0; n * plane];
        for e in 0..n {
            for bi in 0..b {
                let src = &alpha.data()[(e * b + bi) * plane..][..plane];
                for (a, v) in avg[e * plane..][..plane].iter_mut().zip(src) {
                    *a += v;
                }
            }
            if b > 1 {
                avg[e * plane..][..plane].iter_mut().for_each(|a| *a /= b as f64);
            }
        }
        Self {
            site,
            sources,
            weights: Tensor::new([n, h, w], avg).expect("trace shape"),
            per_sample: per_sample.then(|| alpha.clone()),
        }
    }

    pub fn entries(&self) -> usize {
        self.weights.shape()[0]
    }

    fn plane(&self, n: usize) -> &[f64] {
        let p = self.weights.shape()[1] * self.weights.shape()[2];
        &self.weights.data()[n * p..][..p]
    }

    /// Per-entry weight averaged over positions.
    pub fn mean_weights(&self) -> Vec<f64> {
        (0..self.entries())
            .map(|n| {
                let p = self.plane(n);
                p.iter().sum::<f64>() / p.len() as f64
            })
            .collect()
    }

    pub fn min_weights(&self) -> Vec<f64> {
        (0..self.entries()).map(|n| self.plane(n).iter().copied().fold(f64::INFINITY, f64::min)).collect()
    }

    pub fn max_weights(&self) -> Vec<f64> {
        (0..self.entries()).map(|n| self.plane(n).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
    }

    /// Spread of the mean weights (max − min); 0 for uniform routing.
    pub fn uniformity_score(&self) -> f64 {
        let m = self.mean_weights();
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        hi - lo
    }
}

/// Writes one row per (site, history entry):
/// `site,source_side,source_index,mean_weight,min_weight,max_weight`.
pub fn write_trace_csv(traces: &[AttentionTrace], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    wtr.write_record(["site", "source_side", "source_index", "mean_weight", "min_weight", "max_weight"])?;
    for t in traces {
        let (mean, min, max) = (t.mean_weights(), t.min_weights(), t.max_weights());
        for (i, src) in t.sources.iter().enumerate() {
            wtr.write_record([
                t.site.to_string(),
                src.side_label().to_string(),
                src.index().to_string(),
                format!("{:.6}", mean[i]),
                format!("{:.6}", min[i]),
                format!("{:.6}", max[i]),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
