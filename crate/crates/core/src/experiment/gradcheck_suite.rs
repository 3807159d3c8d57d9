//! The `gradcheck` command: central finite differences against the tape for
//! every differentiable operation, attention, the losses and a tiny network.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, Routing};
use crate::error::Result;
use crate::params::{BoundParams, ParamStore};
use crate::rng::named_rng;
use crate::tensor::gradcheck::{gradcheck, GradcheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::tensor::kernels::Padding;
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{combined_loss, LossWeights};
use crate::xattnres::{HistoryPool, QueryInit, StageTag, XAttnResUnit};

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub report: GradcheckReport,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.report.passed())
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.report.passed()).map(|c| c.name).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{:<24} {}  [{:.0} ms]", c.name, c.report, c.elapsed.as_secs_f64() * 1e3);
        }
        let _ = writeln!(
            out,
            "{} of {} checks passed, max rel err {:.3e}, {:.1} s",
            self.checks.len() - self.failures().len(),
            self.checks.len(),
            self.max_rel_error(),
            self.elapsed.as_secs_f64()
        );
        if !self.passed() {
            let _ = writeln!(out, "FAILED: {}", self.failures().join(", "));
        }
        out
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).expect("shape matches data")
}

fn labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Reduces `v` to a scalar through fixed random weights so that every
/// output element carries a distinct gradient.
fn probe(tape: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.leaf(weights.reshaped(tape.shape(v).to_vec())?);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

struct Runner {
    checks: Vec<CheckOutcome>,
}

impl Runner {
    fn check<F>(&mut self, name: &'static str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let start = Instant::now();
        let report = gradcheck(f, &inputs, DEFAULT_STEP, DEFAULT_TOLERANCE)?;
        self.checks.push(CheckOutcome { name, report, elapsed: start.elapsed() });
        Ok(())
    }

    /// Checks `op` with its output reduced by [`probe`].
    fn probed<F>(&mut self, name: &'static str, inputs: Vec<Tensor>, out_numel: usize, op: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let w = random(&[out_numel], &mut named_rng(1, name));
        self.check(name, inputs, move |t, v| {
            let out = op(t, v)?;
            probe(t, out, &w)
        })
    }
}

fn attention_unit(store: &mut ParamStore) -> XAttnResUnit {
    let sources = [(StageTag::enc(1), 2), (StageTag::enc(2), 4), (StageTag::enc(3), 3)];
    XAttnResUnit::new(store, "site", StageTag::dec(1), 3, Some((4, 4)), &sources, QueryInit::KaimingUniform, 5)
}

/// Runs every check. Deterministic; takes a few seconds in release builds.
pub fn run_gradcheck_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = Runner { checks: Vec::new() };
    let mut rng = named_rng(0, "gradcheck");
    let mut rnd = |shape: &[usize]| random(shape, &mut rng);

    let (a, b) = (rnd(&[2, 3, 4, 4]), rnd(&[2, 3, 4, 4]));
    r.probed("add", vec![a.clone(), b.clone()], 96, |t, v| t.add(v[0], v[1]))?;
    r.probed("mul", vec![a.clone(), b], 96, |t, v| t.mul(v[0], v[1]))?;
    r.probed("scale", vec![a.clone()], 96, |t, v| Ok(t.scale(v[0], -1.75)))?;
    r.probed("relu", vec![a.clone()], 96, |t, v| Ok(t.relu(v[0])))?;
    r.probed("reshape", vec![a.clone()], 96, |t, v| t.reshape(v[0], &[6, 16]))?;
    r.check("sum", vec![a], |t, v| Ok(t.sum(v[0])))?;

    let (x, w3, bias) = (rnd(&[2, 3, 5, 6]), rnd(&[4, 3, 3, 3]), rnd(&[4]));
    r.probed("conv3x3_same", vec![x.clone(), w3.clone(), bias.clone()], 2 * 4 * 30, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), Padding::Same)
    })?;
    r.probed("conv3x3_valid", vec![x.clone(), w3, bias], 2 * 4 * 12, |t, v| t.conv2d(v[0], v[1], Some(v[2]), Padding::None))?;
    r.probed("conv1x1", vec![x, rnd(&[2, 3, 1, 1])], 2 * 2 * 30, |t, v| t.conv2d(v[0], v[1], None, Padding::Same))?;

    let m = rnd(&[2, 2, 6, 5]);
    r.probed("adaptive_max_pool", vec![m.clone()], 2 * 2 * 4 * 3, |t, v| t.adaptive_max_pool(v[0], 4, 3))?;
    r.probed("bilinear_up", vec![m.clone()], 2 * 2 * 9 * 7, |t, v| t.bilinear_resize(v[0], 9, 7))?;
    r.probed("bilinear_down", vec![m], 2 * 2 * 4 * 3, |t, v| t.bilinear_resize(v[0], 4, 3))?;

    let (f, gain, q) = (rnd(&[2, 4, 3, 3]), positive(&[4], &mut named_rng(2, "gain")), rnd(&[4]));
    r.probed("rmsnorm_channels", vec![f.clone(), gain.clone()], 72, |t, v| t.rmsnorm_channels(v[0], v[1], 1e-6))?;
    r.probed("softmax_axis0", vec![f.clone()], 72, |t, v| t.softmax(v[0], 0))?;
    r.probed("softmax_axis1", vec![f.clone()], 72, |t, v| t.softmax(v[0], 1))?;
    r.probed("channel_dot", vec![f.clone(), q.clone()], 18, |t, v| t.channel_dot(v[0], v[1]))?;
    r.probed("rms_query_logits", vec![f.clone(), gain, q], 18, |t, v| t.rms_query_logits(v[0], v[1], v[2], 1e-6))?;
    r.probed("concat_channels", vec![f.clone(), rnd(&[2, 1, 3, 3])], 90, |t, v| t.concat_channels(v[0], v[1]))?;
    r.probed("concat_batch", vec![f.clone(), rnd(&[2, 4, 3, 3])], 144, |t, v| t.concat_batch(&[v[0], v[1]]))?;
    r.probed("weighted_sum", vec![rnd(&[6, 4, 3, 3]), rnd(&[3, 2, 3, 3])], 72, |t, v| t.weighted_sum(v[0], v[1], 3))?;

    let logits = rnd(&[2, 3, 4, 4]).reshaped([2, 3, 4, 4])?;
    let lab = labels(32, 3, &mut named_rng(3, "labels"));
    let scaled = |s: f64, t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect());
    let logits = scaled(2.0, &logits)?;
    {
        let l = lab.clone();
        r.check("cross_entropy", vec![logits.clone()], move |t, v| t.cross_entropy(v[0], &l))?;
        let l = lab.clone();
        r.check("soft_dice_loss", vec![logits.clone()], move |t, v| t.soft_dice_loss(v[0], &l, 1.0))?;
        let l = lab;
        r.check("combined_loss", vec![logits], move |t, v| combined_loss(t, v[0], &l, &LossWeights::default()))?;
    }

    // attend: current feature, three history entries of mixed sizes and
    // widths, then every unit parameter
    let mut store = ParamStore::new();
    let unit = attention_unit(&mut store);
    let mut inputs = vec![rnd(&[2, 3, 4, 4]), rnd(&[2, 2, 8, 8]), rnd(&[2, 4, 2, 2]), rnd(&[2, 3, 3, 5])];
    for (name, p) in store.iter() {
        inputs.push(if name.ends_with("rms_gain") { positive(p.shape(), &mut named_rng(4, name)) } else { p.clone() });
    }
    let w = random(&[96], &mut named_rng(1, "attend"));
    let tags = [StageTag::enc(1), StageTag::enc(2), StageTag::enc(3)];
    r.check("attend", inputs, |t, v| {
        let params = BoundParams::from_vars(v[4..].to_vec());
        let mut pool = HistoryPool::new();
        for (k, tag) in tags.iter().enumerate() {
            pool.append(v[1 + k], *tag)?;
        }
        let (out, _) = unit.attend(t, &params, &pool, v[0])?;
        probe(t, out, &w)
    })?;

    // end to end: sum of logits with respect to every parameter and the image
    let routings = [
        ("backbone_skip_only", Routing::SkipOnly),
        ("backbone_no_skip", Routing::NoSkip),
        ("backbone_replace", Routing::Replace),
        ("backbone_both", Routing::Both),
    ];
    for (name, routing) in routings {
        let cfg = BackboneConfig {
            stages: 2,
            in_channels: 1,
            num_classes: 3,
            routing,
            init_scheme: QueryInit::KaimingUniform,
            seed: 3,
            ..BackboneConfig::default()
        };
        let net = Backbone::build(cfg)?;
        let mut inputs = vec![rnd(&[1, 1, 8, 8])];
        inputs.extend(net.params.iter().map(|(_, p)| p.clone()));
        r.check(name, inputs, |t, v| {
            let params = BoundParams::from_vars(v[1..].to_vec());
            let out = net.forward(t, &params, v[0])?;
            Ok(t.sum(out.logits))
        })?;
    }

    Ok(SuiteReport { checks: r.checks, elapsed: start.elapsed() })
}
