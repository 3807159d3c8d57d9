//! Ablation suites: every row configuration trained under every seed,
//! aggregated as mean ± std.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use super::config::ExperimentConfig;
use super::run::{execute, load_dataset, write_outputs, RunOutcome};
use crate::backbone::{BackboneConfig, Position, Routing};
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::xattnres::QueryInit;

pub const ABLATION_HEADER: [&str; 6] = ["suite", "row", "kind", "seed", "metric", "value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    /// Skips against attention routing.
    Skip,
    /// Where attention sites go, without skips.
    Position,
    /// Pseudo-query initialisation, attention alongside skips.
    Init,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Skip => "skip",
            Suite::Position => "position",
            Suite::Init => "init",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(Suite::Skip),
            "position" => Ok(Suite::Position),
            "init" => Ok(Suite::Init),
            other => Err(config_err!("unknown suite '{other}' (expected skip, position or init)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteRow {
    /// Tag used in the CSV.
    pub tag: &'static str,
    /// Row label of the rendered table.
    pub label: &'static str,
    pub routing: Routing,
    pub position: Position,
    pub init: Option<QueryInit>,
}

impl SuiteRow {
    pub fn apply(&self, base: &BackboneConfig) -> BackboneConfig {
        BackboneConfig {
            routing: self.routing,
            position: self.position,
            init_scheme: self.init.unwrap_or(base.init_scheme),
            ..base.clone()
        }
    }
}

const fn row(tag: &'static str, label: &'static str, routing: Routing, position: Position, init: Option<QueryInit>) -> SuiteRow {
    SuiteRow { tag, label, routing, position, init }
}

impl Suite {
    pub fn title(self) -> &'static str {
        match self {
            Suite::Skip => "Ablation: skip connection vs. XAttnRes",
            Suite::Position => "Application position",
            Suite::Init => "Pseudo-query initialization",
        }
    }

    pub fn rows(self) -> Vec<SuiteRow> {
        use Position as P;
        use Routing as R;
        match self {
            Suite::Skip => vec![
                row("baseline", "U-Net (baseline)", R::SkipOnly, P::Full, None),
                row("no-skip", "U-Net (no skip)", R::NoSkip, P::Full, None),
                row("replace", "U-Net + XAttnRes (replace)", R::Replace, P::Full, None),
                row("both", "U-Net + XAttnRes (both)", R::Both, P::Full, None),
            ],
            Suite::Position => vec![
                row("None", "None", R::Replace, P::None, None),
                row("Encoder only", "Encoder only", R::Replace, P::EncoderOnly, None),
                row("Decoder only", "Decoder only", R::Replace, P::DecoderOnly, None),
                row("Full", "Full (Enc. + Dec.)", R::Replace, P::Full, None),
            ],
            Suite::Init => vec![
                row("Zero-init", "Zero-init", R::Both, P::Full, Some(QueryInit::ZeroInit)),
                row("Random", "Random", R::Both, P::Full, Some(QueryInit::RandomNormal)),
                row("Kaiming uniform", "Kaiming uniform", R::Both, P::Full, Some(QueryInit::KaimingUniform)),
                row("Xavier uniform", "Xavier uniform", R::Both, P::Full, Some(QueryInit::XavierUniform)),
            ],
        }
    }
}

/// Finished runs keyed by their full model, training and data settings, so
/// identical runs shared between suites train once.
#[derive(Default)]
pub struct RunCache {
    runs: Mutex<HashMap<String, RunOutcome>>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(cfg: &ExperimentConfig, seed: u64) -> String {
        let (model, train) = cfg.for_seed(seed);
        format!("{model:?}|{train:?}|{:?}", cfg.data)
    }

    pub fn len(&self) -> usize {
        self.runs.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct RowResult {
    pub row: SuiteRow,
    pub model: BackboneConfig,
    /// One outcome per seed, in seed-list order.
    pub runs: Vec<RunOutcome>,
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RowResult {
    /// `(name, per-seed values)` of the aggregated metrics.
    pub fn metrics(&self) -> [(&'static str, Vec<f64>); 3] {
        let get = |f: fn(&RunOutcome) -> f64| self.runs.iter().map(f).collect::<Vec<_>>();
        [("dice", get(|r| r.test.mean_dice)), ("hd95", get(|r| r.test.mean_hd95)), ("iou", get(|r| r.test.mean_iou))]
    }

    pub fn mean_dice(&self) -> f64 {
        mean_std(&self.metrics()[0].1).0
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
}

impl AblationResult {
    pub fn row(&self, tag: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row.tag == tag)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        w.write_record(ABLATION_HEADER)?;
        let suite = self.suite.to_string();
        for r in &self.rows {
            for (metric, values) in r.metrics() {
                for (seed, v) in self.seeds.iter().zip(&values) {
                    w.write_record([&suite, r.row.tag, "run", &seed.to_string(), metric, &format!("{v:.6}")])?;
                }
                let (mean, std) = mean_std(&values);
                w.write_record([&suite, r.row.tag, "mean", "all", metric, &format!("{mean:.6}")])?;
                w.write_record([&suite, r.row.tag, "std", "all", metric, &format!("{std:.6}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Text table with one row per suite entry; Dice and mIoU in percent.
    pub fn render(&self) -> String {
        let pm = |v: &[f64], scale: f64| {
            let (m, s) = mean_std(v);
            format!("{:.2} ± {:.2}", m * scale, s * scale)
        };
        let skip_cols = self.suite == Suite::Skip;
        let mut out = format!("{} ({} seeds)\n", self.suite.title(), self.seeds.len());
        let head = match self.suite {
            Suite::Skip => "Model",
            Suite::Position => "Position",
            Suite::Init => "Initialization",
        };
        let mut header = format!("{head:<28}");
        if skip_cols {
            header += &format!("{:<6}{:<10}", "Skip", "XAttnRes");
        }
        header += &format!("{:>16}{:>16}{:>16}", "DSC (%)", "HD95", "mIoU (%)");
        out += &header;
        out += "\n";
        out += &"-".repeat(header.chars().count());
        out += "\n";
        for r in &self.rows {
            let [(_, dice), (_, hd), (_, iou)] = r.metrics();
            let mut line = format!("{:<28}", r.row.label);
            if skip_cols {
                let skip = matches!(r.row.routing, Routing::SkipOnly | Routing::Both);
                let attn = matches!(r.row.routing, Routing::Replace | Routing::Both);
                line += &format!("{:<6}{:<10}", if skip { "✓" } else { "--" }, if attn { "✓" } else { "--" });
            }
            line += &format!("{:>16}{:>16}{:>16}", pm(&dice, 100.0), pm(&hd, 1.0), pm(&iou, 100.0));
            out += &line;
            out += "\n";
        }
        out
    }
}

fn run_all(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    tasks: &[(usize, ExperimentConfig, u64)],
    cache: &RunCache,
    log: &Mutex<&mut (dyn Write + Send)>,
) -> Result<Vec<Option<RunOutcome>>> {
    let results: Mutex<Vec<Option<Result<RunOutcome>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let worker = || loop {
        let k = {
            let mut n = next.lock().expect("queue lock");
            if *n >= tasks.len() {
                break;
            }
            *n += 1;
            *n - 1
        };
        let (_, task_cfg, seed) = &tasks[k];
        let key = RunCache::key(task_cfg, *seed);
        let cached = cache.runs.lock().expect("cache lock").get(&key).cloned();
        let res = match cached {
            Some(hit) => {
                let _ = writeln!(log.lock().expect("log lock"), "[{}] reused", hit.run_id);
                Ok(hit)
            }
            None => {
                let mut buf = Vec::new();
                let r = execute(task_cfg, dataset, *seed, &mut buf);
                let _ = log.lock().expect("log lock").write_all(&buf);
                if let Ok(o) = &r {
                    cache.runs.lock().expect("cache lock").insert(key, o.clone());
                }
                r
            }
        };
        results.lock().expect("results lock")[k] = Some(res);
    };
    let jobs = cfg.jobs.clamp(1, tasks.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.transpose())
        .collect()
}

/// Runs `suite` over `cfg.seeds` on an already loaded dataset.
pub fn ablate_with(suite: Suite, cfg: &ExperimentConfig, dataset: &Dataset, cache: &RunCache, log: &mut (dyn Write + Send)) -> Result<AblationResult> {
    if cfg.seeds.is_empty() {
        return Err(config_err!("ablation needs at least one seed"));
    }
    let rows = suite.rows();
    let mut tasks = Vec::new();
    for (ri, row) in rows.iter().enumerate() {
        let mut c = cfg.clone();
        c.model = row.apply(&cfg.model);
        for &seed in &cfg.seeds {
            tasks.push((ri, c.clone(), seed));
        }
    }
    let log = Mutex::new(log);
    let outcomes = run_all(cfg, dataset, &tasks, cache, &log)?;
    let mut results: Vec<RowResult> =
        rows.iter().map(|r| RowResult { row: *r, model: r.apply(&cfg.model), runs: Vec::new() }).collect();
    for ((ri, _, _), o) in tasks.iter().zip(outcomes) {
        results[*ri].runs.push(o.expect("every task ran"));
    }
    Ok(AblationResult { suite, seeds: cfg.seeds.clone(), rows: results })
}

/// `ablate`: runs the suite, writes `ablation_<suite>.csv`, the rendered
/// table, and each run's outputs under `runs/<run_id>/`.
pub fn run_ablation(suite: Suite, cfg: &ExperimentConfig, log: &mut (dyn Write + Send)) -> Result<AblationResult> {
    let dataset = load_dataset(&cfg.data)?;
    let result = ablate_with(suite, cfg, &dataset, &RunCache::new(), log)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in &result.rows {
        let mut row_cfg = cfg.clone();
        row_cfg.model = r.model.clone();
        for (o, &seed) in r.runs.iter().zip(&result.seeds) {
            row_cfg.seed = seed;
            write_outputs(&row_cfg, o, &dataset, &dir.join("runs").join(&o.run_id))?;
        }
    }
    result.write_csv(&dir.join(format!("ablation_{suite}.csv")))?;
    let table = result.render();
    let path = dir.join(format!("ablation_{suite}.txt"));
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    let _ = writeln!(log, "\n{table}");
    Ok(result)
}
