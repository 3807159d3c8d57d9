//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines always
//! reach the console. The trend criteria train 35 models and dominate the
//! runtime.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xattnres::backbone::{Backbone, BackboneConfig, Position, Routing};
use xattnres::data::{decode_checkpoint, encode_checkpoint, generate_synthetic, write_metrics_csv, Dataset, SyntheticSpec};
use xattnres::experiment::{ablate_with, execute, run_gradcheck_suite, AblationResult, ExperimentConfig, RunCache, Suite};
use xattnres::metrics::{dice, hd95, hd95_bruteforce_oracle, iou, Mask};
use xattnres::params::ParamStore;
use xattnres::xattnres::{naive_attend_oracle, HistoryPool, QueryInit, StageTag, XAttnResUnit};
use xattnres::{Tape, Tensor};

/// Criteria that train models and compare seed means.
const TREND_CRITERIA: [&str; 3] = ["6", "7", "10"];
/// Learning rate of the desk-scale trend protocol.
const TREND_LEARNING_RATE: f64 = 3e-3;

struct Verdict {
    id: &'static str,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn criterion(id: &'static str, title: &'static str, f: impl FnOnce() -> (bool, String)) -> Verdict {
    let start = Instant::now();
    let (passed, detail) = f();
    let v = Verdict { id, title, passed, detail, elapsed: start.elapsed() };
    println!(
        "criterion {:>2} {}: {}  ({}; {:.1} s)",
        v.id,
        if v.passed { "PASS" } else { "FAIL" },
        v.title,
        v.detail,
        v.elapsed.as_secs_f64()
    );
    v
}

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn ablation_matrix() -> Vec<BackboneConfig> {
    let mut out = Vec::new();
    for routing in [Routing::SkipOnly, Routing::NoSkip, Routing::Replace, Routing::Both] {
        for position in [Position::None, Position::EncoderOnly, Position::DecoderOnly, Position::Full] {
            for init in [QueryInit::ZeroInit, QueryInit::RandomNormal, QueryInit::KaimingUniform, QueryInit::XavierUniform] {
                out.push(BackboneConfig { routing, position, init_scheme: init, ..BackboneConfig::default() });
            }
        }
    }
    out
}

fn gradcheck_suite() -> (bool, String) {
    let report = run_gradcheck_suite().unwrap();
    let ok = report.passed() && report.checks.len() >= 10 && report.elapsed < Duration::from_secs(120);
    let mut detail = format!("{} operations, max rel err {:.2e}", report.checks.len(), report.max_rel_error());
    if !report.passed() {
        detail += &format!(", failing: {}", report.failures().join(", "));
    }
    (ok, detail)
}

fn zero_init_uniformity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut sites = 0;
    for stages in [2, 3, 4] {
        for cfg in ablation_matrix().into_iter().filter(|c| c.init_scheme == QueryInit::ZeroInit) {
            let cfg = BackboneConfig { stages, seed: stages as u64, ..cfg };
            let net = Backbone::build(cfg).unwrap();
            let side = 4 << (stages - 1);
            let img = random_tensor([2, 1, side, side], &mut rng, 1.0);
            let mut tape = Tape::new();
            let params = net.params.bind(&mut tape);
            let x = tape.leaf(img);
            let out = net.forward_with(&mut tape, &params, x, true).unwrap();
            for t in &out.traces {
                let expect = 1.0 / t.entries() as f64;
                let w = t.per_sample.as_ref().unwrap();
                worst = w.data().iter().map(|v| (v - expect).abs()).fold(worst, f64::max);
                sites += 1;
            }
        }
    }
    (worst <= 1e-12, format!("{sites} sites, max |w - 1/(K+1)| = {worst:.1e}"))
}

/// Builds a unit whose history entries have varied widths and sizes.
fn random_attend_case(
    rng: &mut ChaCha8Rng,
    b: usize,
    c: usize,
    hw: (usize, usize),
    k: usize,
) -> (XAttnResUnit, ParamStore, Vec<(StageTag, Tensor)>, Tensor) {
    let entries: Vec<(StageTag, Tensor)> = (1..=k)
        .map(|i| {
            let ci = rng.random_range(1..=4);
            let (h, w) = (rng.random_range(1..=2 * hw.0), rng.random_range(1..=2 * hw.1));
            (StageTag::enc(i), random_tensor([b, ci, h, w], rng, 3.0))
        })
        .collect();
    let sources: Vec<(StageTag, usize)> = entries.iter().map(|(t, v)| (*t, v.shape()[1])).collect();
    let init = [QueryInit::RandomNormal, QueryInit::KaimingUniform, QueryInit::XavierUniform][rng.random_range(0..3)];
    let mut store = ParamStore::new();
    let unit = XAttnResUnit::new(&mut store, "u", StageTag::dec(1), c, Some(hw), &sources, init, rng.random());
    // larger queries so that the weights are far from uniform
    for q in store.get_mut(unit.pseudo_query).data_mut() {
        *q *= 3.0;
    }
    for g in store.get_mut(unit.rms_gain).data_mut() {
        *g = rng.random_range(0.5..1.5);
    }
    let x = random_tensor([b, c, hw.0, hw.1], rng, 3.0);
    (unit, store, entries, x)
}

fn attend(unit: &XAttnResUnit, store: &ParamStore, entries: &[(StageTag, Tensor)], x: &Tensor) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let mut pool = HistoryPool::new();
    let mut aligned = Vec::new();
    for (tag, v) in entries {
        let var = tape.leaf(v.clone());
        pool.append(var, *tag).unwrap();
        let a = unit.align(&mut tape, &params, var, *tag).unwrap();
        aligned.push(tape.value(a).clone());
    }
    aligned.push(x.clone());
    let xv = tape.leaf(x.clone());
    let (out, _) = unit.attend(&mut tape, &params, &pool, xv).unwrap();
    (tape.value(out).clone(), aligned)
}

fn convex_bound() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let (b, c) = (rng.random_range(1..=2), rng.random_range(1..=4));
        let hw = (rng.random_range(1..=5), rng.random_range(1..=5));
        let k = rng.random_range(0..=5);
        let (unit, store, entries, x) = random_attend_case(&mut rng, b, c, hw, k);
        let (out, stack) = attend(&unit, &store, &entries, &x);
        for (i, &o) in out.data().iter().enumerate() {
            let lo = stack.iter().map(|s| s.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = stack.iter().map(|s| s.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let excess = (lo - o).max(o - hi);
            worst = worst.max(excess);
            if excess > 1e-9 {
                violations += 1;
            }
        }
    }
    (violations == 0, format!("1000 configurations, {violations} violations, worst excess {worst:.1e}"))
}

fn oracle_equivalence() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut cases, mut worst) = (0, 0.0f64);
    for b in 1..=2 {
        for c in 1..=4 {
            for h in 1..=4 {
                for w in 1..=4 {
                    for k in 0..=4 {
                        let (unit, store, entries, x) = random_attend_case(&mut rng, b, c, (h, w), k);
                        let (out, _) = attend(&unit, &store, &entries, &x);
                        let expected = naive_attend_oracle(&entries, &x, &unit, &store).unwrap();
                        worst = worst.max(out.max_abs_diff(&expected));
                        cases += 1;
                    }
                }
            }
        }
    }
    (worst < 1e-6, format!("{cases} shapes, max abs diff {worst:.1e}"))
}

/// Overhead derived from the stage layout alone: each site owns a query and
/// a gain of its width plus a projection from every history source of
/// another width.
fn closed_form_overhead(cfg: &BackboneConfig) -> usize {
    let attn = matches!(cfg.routing, Routing::Replace | Routing::Both);
    let enc = attn && matches!(cfg.position, Position::EncoderOnly | Position::Full);
    let dec = attn && matches!(cfg.position, Position::DecoderOnly | Position::Full);
    let width = |level: usize| cfg.base_channels * (1 << (level - 1));
    let site = |c: usize, sources: &[usize]| 2 * c + sources.iter().filter(|&&s| s != c).map(|s| s * c).sum::<usize>();
    let s = cfg.stages;
    let mut history = Vec::new();
    let mut total = 0;
    for i in 1..=s {
        let c = if i == 1 { cfg.in_channels } else { width(i - 1) };
        if enc {
            total += site(c, &history);
        }
        history.push(width(i));
    }
    for j in 1..s {
        let c = width(s - j + 1);
        if dec {
            total += site(c, &history);
        }
        history.push(width(s - j));
    }
    total
}

fn parameter_accounting() -> (bool, String) {
    let mut mismatches = Vec::new();
    let mut n = 0;
    for stages in [2, 3, 4] {
        for cfg in ablation_matrix() {
            let cfg = BackboneConfig { stages, ..cfg };
            let net = Backbone::build(cfg.clone()).unwrap();
            let (total, overhead) = net.parameter_count();
            let plain = Routing::SkipOnly == cfg.routing || Routing::NoSkip == cfg.routing;
            let base_routing = if matches!(cfg.routing, Routing::SkipOnly | Routing::Both) { Routing::SkipOnly } else { Routing::NoSkip };
            let base = Backbone::build(BackboneConfig { routing: base_routing, ..cfg.clone() }).unwrap().parameter_count().0;
            let expected = closed_form_overhead(&cfg);
            if overhead != expected || total != base + expected || (plain && overhead != 0) {
                mismatches.push(format!("{:?}/{:?} S={stages}: {overhead} vs {expected}", cfg.routing, cfg.position));
            }
            n += 1;
        }
    }
    let default_both = Backbone::build(BackboneConfig { routing: Routing::Both, ..BackboneConfig::default() }).unwrap().parameter_count();
    (
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{n} configurations exact; default Both: {} total, +{} overhead", default_both.0, default_both.1)
        } else {
            mismatches.join("; ")
        },
    )
}

fn metric_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut hd_mismatch = 0;
    let mut link = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let p = rng.random_range(0.02..0.5);
        let a = Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap();
        let b = Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(p)).collect()).unwrap();
        if hd95(&a, &b).unwrap() != hd95_bruteforce_oracle(&a, &b).unwrap() {
            hd_mismatch += 1;
        }
        let d = dice(&a, &b).unwrap();
        link = link.max((iou(&a, &b).unwrap() - d / (2.0 - d)).abs());
    }
    let mask = |on: &[(usize, usize)]| {
        let mut m = Mask::empty(8, 8);
        for &(y, x) in on {
            m.set(y, x, true);
        }
        m
    };
    let (p, g) = (mask(&[(0, 0), (0, 1)]), mask(&[(0, 1), (0, 2)]));
    let hand = dice(&p, &g).unwrap() == 0.5
        && iou(&p, &g).unwrap() == 1.0 / 3.0
        && hd95(&mask(&[(0, 0)]), &mask(&[(3, 4)])).unwrap() == 5.0;
    let ok = hd_mismatch == 0 && link <= 1e-12 && hand;
    (ok, format!("hd95 mismatches {hd_mismatch}/100, max |iou - d/(2-d)| {link:.1e}, hand cases {}", if hand { "exact" } else { "WRONG" }))
}

fn determinism(dataset: &Dataset) -> (bool, String) {
    let mut cfg = ExperimentConfig::default();
    cfg.set("epochs", "2").unwrap();
    cfg.set("routing", "both").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = execute(&cfg, dataset, 0, &mut std::io::sink()).unwrap();
        let path = dir.path().join(name);
        write_metrics_csv(&out.rows, &path).unwrap();
        csvs.push((std::fs::read(&path).unwrap(), out));
    }
    let same_csv = csvs[0].0 == csvs[1].0;

    let backbone = &csvs[0].1.model.backbone;
    let bytes = encode_checkpoint(&backbone.config, &backbone.params, Some(&csvs[0].1.model.optimizer)).unwrap();
    let restored = decode_checkpoint(&bytes).unwrap().restore().unwrap();
    let (images, _) = dataset.batch(&dataset.splits.test[..4]).unwrap();
    let (before, _) = backbone.infer(&images).unwrap();
    let (after, _) = restored.infer(&images).unwrap();
    let bit_identical = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    (
        same_csv && bit_identical,
        format!("metrics CSV {}, checkpoint forward {}", if same_csv { "byte-identical" } else { "DIFFERS" }, if bit_identical { "bit-identical" } else { "DIFFERS" }),
    )
}

fn trend_protocol() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.optimizer.learning_rate = TREND_LEARNING_RATE;
    cfg.jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    cfg
}

fn dice_of(result: &AblationResult, tag: &str) -> f64 {
    100.0 * result.row(tag).unwrap().mean_dice()
}

fn table3(result: &AblationResult, elapsed: Duration) -> (bool, String) {
    let [base, no_skip, replace, both] = ["baseline", "no-skip", "replace", "both"].map(|t| dice_of(result, t));
    let a = no_skip <= base - 2.0;
    let b = replace >= no_skip + 2.0 && (replace - base).abs() <= 1.5;
    let c = both >= base - 0.5;
    let fast = elapsed <= Duration::from_secs(30 * 60);
    let mark = |ok: bool| if ok { "ok" } else { "NO" };
    (
        a && b && c && fast,
        format!(
            "baseline {base:.2}, no-skip {no_skip:.2}, replace {replace:.2}, both {both:.2}; (a) {} (b) {} (c) {} runtime {:.1} min {}",
            mark(a),
            mark(b),
            mark(c),
            elapsed.as_secs_f64() / 60.0,
            mark(fast)
        ),
    )
}

fn table4(result: &AblationResult) -> (bool, String) {
    let [none, enc, dec, full] = ["None", "Encoder only", "Decoder only", "Full"].map(|t| dice_of(result, t));
    let ok = full >= dec - 0.5 && dec >= enc - 0.5 && enc >= none - 0.5;
    (ok, format!("Full {full:.2}, Decoder only {dec:.2}, Encoder only {enc:.2}, None {none:.2}"))
}

fn specialization(result: &AblationResult) -> (bool, String) {
    let row = result.row("replace").unwrap();
    let per_seed: Vec<f64> =
        row.runs.iter().map(|r| r.traces.iter().map(|t| t.uniformity_score()).fold(0.0, f64::max)).collect();
    let first = per_seed[0];
    let sites = row.runs[0].traces.iter().map(|t| format!("{}={:.3}", t.site, t.uniformity_score())).collect::<Vec<_>>();
    (
        first > 0.05,
        format!(
            "seed {} sites {}; max per seed {}",
            result.seeds[0],
            sites.join(" "),
            per_seed.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut verdicts = vec![
        criterion("1", "gradient-check suite", gradcheck_suite),
        criterion("2", "zero-init uniformity", zero_init_uniformity),
        criterion("3", "convex-combination bound", convex_bound),
        criterion("4", "oracle equivalence", oracle_equivalence),
        criterion("5", "parameter accounting", parameter_accounting),
    ];
    verdicts.push(criterion("8", "metric oracles", metric_oracles));

    let cfg = trend_protocol();
    let dataset = generate_synthetic(&SyntheticSpec::default()).unwrap();
    verdicts.push(criterion("9", "determinism and persistence", || determinism(&dataset)));

    let cache = RunCache::new();
    let mut log = std::io::stderr();
    let t3_start = Instant::now();
    let skip = ablate_with(Suite::Skip, &cfg, &dataset, &cache, &mut log).unwrap();
    let t3_elapsed = t3_start.elapsed();
    eprintln!("{}", skip.render());
    verdicts.push(criterion("6", "skip-routing trend", || table3(&skip, t3_elapsed)));
    verdicts.push(criterion("10", "routing specialization", || specialization(&skip)));
    let position = ablate_with(Suite::Position, &cfg, &dataset, &cache, &mut log).unwrap();
    eprintln!("{}", position.render());
    verdicts.push(criterion("7", "position trend", || table4(&position)));

    verdicts.sort_by_key(|v| v.id.parse::<u32>().unwrap());
    println!("\nacceptance summary ({:.1} min)", start.elapsed().as_secs_f64() / 60.0);
    for v in &verdicts {
        println!("  criterion {:>2}: {}  {}", v.id, if v.passed { "PASS" } else { "FAIL" }, v.title);
    }
    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    if failed.is_empty() {
        return;
    }
    println!("failed criteria: {}", failed.join(", "));
    // Trend criteria depend on seeds and hardware; they gate the exit code
    // only in strict mode.
    let strict = std::env::var_os("XATTNRES_STRICT_ACCEPTANCE").is_some();
    let gating: Vec<&str> = failed.iter().copied().filter(|id| strict || !TREND_CRITERIA.contains(id)).collect();
    if !gating.is_empty() {
        std::process::exit(1);
    }
    println!("trend criteria are reported only; set XATTNRES_STRICT_ACCEPTANCE=1 to fail on them");
}
