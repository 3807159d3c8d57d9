//! Cross-stage attention residuals.
//!
//! A [`HistoryPool`] collects every stage output of one forward pass in
//! production order. An [`XAttnResUnit`] aligns each pooled feature to its
//! own resolution and width, stacks them with the current feature, and
//! mixes the stack per position with softmax weights computed from one
//! learned pseudo-query against RMS-normalized keys. Values enter the
//! weighted sum unnormalized.

mod oracle;
mod trace;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use oracle::naive_attend_oracle;
pub use trace::{write_trace_csv, AttentionTrace, EntrySource};

use crate::error::{contract_err, shape_err, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::named_rng;
use crate::tensor::{kernels::Padding, Tape, Tensor, Var};

pub const RMS_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Identifies the stage that produced a feature map: `enc1..encS`, `dec1..`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StageTag {
    pub side: Side,
    pub index: usize,
}

impl StageTag {
    pub fn enc(index: usize) -> Self {
        Self { side: Side::Encoder, index }
    }

    pub fn dec(index: usize) -> Self {
        Self { side: Side::Decoder, index }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side {
            Side::Encoder => write!(f, "enc{}", self.index),
            Side::Decoder => write!(f, "dec{}", self.index),
        }
    }
}

/// Ordered stage outputs of a single forward pass.
#[derive(Debug, Clone, Default)]
pub struct HistoryPool {
    entries: Vec<(StageTag, Var)>,
}

impl HistoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, feature: Var, tag: StageTag) -> Result<()> {
        if self.entries.iter().any(|(t, _)| *t == tag) {
            return Err(contract_err!("stage {tag} already appended to the history pool"));
        }
        self.entries.push((tag, feature));
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tags(&self) -> Vec<StageTag> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    pub fn entries(&self) -> &[(StageTag, Var)] {
        &self.entries
    }

    /// Copies the pooled values off the tape.
    pub fn snapshot(&self, tape: &Tape) -> Vec<(StageTag, Tensor)> {
        self.entries.iter().map(|&(t, v)| (t, tape.value(v).clone())).collect()
    }
}

/// Initial distribution of a pseudo-query vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QueryInit {
    #[default]
    ZeroInit,
    /// Normal(0, 0.02).
    RandomNormal,
    /// He uniform for a `[C, 1]` weight: bound `√2·√(3 / fan_in)` with fan_in = 1.
    KaimingUniform,
    /// Glorot uniform for a `[C, 1]` weight: bound `√(6 / (1 + C))`.
    XavierUniform,
}

impl QueryInit {
    pub fn sample(self, channels: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            QueryInit::ZeroInit => vec![0.0; channels],
            QueryInit::RandomNormal => {
                let n = Normal::new(0.0, 0.02).expect("valid std");
                (0..channels).map(|_| n.sample(rng)).collect()
            }
            QueryInit::KaimingUniform => {
                let bound = 2f64.sqrt() * 3f64.sqrt();
                (0..channels).map(|_| rng.random_range(-bound..bound)).collect()
            }
            QueryInit::XavierUniform => {
                let bound = (6.0 / (1.0 + channels as f64)).sqrt();
                (0..channels).map(|_| rng.random_range(-bound..bound)).collect()
            }
        }
    }
}

/// One XAttnRes application site.
#[derive(Debug, Clone)]
pub struct XAttnResUnit {
    pub site: StageTag,
    pub target_channels: usize,
    /// Fixed target resolution, or `None` to follow the incoming feature.
    pub target_hw: Option<(usize, usize)>,
    pub rms_epsilon: f64,
    pub pseudo_query: ParamId,
    pub rms_gain: ParamId,
    /// 1×1 projections, present only for sources whose width differs from the target.
    pub projections: BTreeMap<StageTag, ParamId>,
}

impl XAttnResUnit {
    /// Registers the unit's parameters in `store` under `prefix`.
    ///
    /// `sources` lists every stage that can precede this site with its
    /// channel count.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        site: StageTag,
        target_channels: usize,
        target_hw: Option<(usize, usize)>,
        sources: &[(StageTag, usize)],
        init: QueryInit,
        seed: u64,
    ) -> Self {
        let c = target_channels;
        let qname = format!("{prefix}.query");
        let query = init.sample(c, &mut named_rng(seed, &qname));
        let pseudo_query = store.add(qname, Tensor::new([c], query).expect("query length"));
        let rms_gain = store.add(format!("{prefix}.rms_gain"), Tensor::full([c], 1.0));
        let mut projections = BTreeMap::new();
        for &(tag, src_c) in sources {
            if src_c == c {
                continue;
            }
            let name = format!("{prefix}.proj.{tag}");
            let mut rng = named_rng(seed, &name);
            let bound = (3.0 / src_c as f64).sqrt();
            let w = (0..c * src_c).map(|_| rng.random_range(-bound..bound)).collect();
            let id = store.add(name, Tensor::new([c, src_c, 1, 1], w).expect("projection shape"));
            projections.insert(tag, id);
        }
        Self { site, target_channels, target_hw, rms_epsilon: RMS_EPSILON, pseudo_query, rms_gain, projections }
    }

    /// Scalar parameter count: query, gain, and every projection.
    pub fn overhead(&self, store: &ParamStore) -> usize {
        let proj: usize = self.projections.values().map(|&id| store.get(id).numel()).sum();
        store.get(self.pseudo_query).numel() + store.get(self.rms_gain).numel() + proj
    }

    /// Brings `h` to `[B, C, H', W']`: spatial resize and a 1×1 projection
    /// iff the channel counts differ. Matching features pass through as-is.
    ///
    /// Units without a fixed resolution align to `h`'s own size.
    pub fn align(&self, tape: &mut Tape, params: &BoundParams, h: Var, tag: StageTag) -> Result<Var> {
        let [_, _, hh, hw] = tape.dims4(h)?;
        self.align_to(tape, params, h, tag, self.target_hw.unwrap_or((hh, hw)))
    }

    fn align_to(&self, tape: &mut Tape, params: &BoundParams, h: Var, tag: StageTag, (th, tw): (usize, usize)) -> Result<Var> {
        let [_, c, hh, hw] = tape.dims4(h)?;
        // Pooling must precede the projection; bilinear upsampling is linear
        // per channel and commutes with it, so it runs on the narrower side.
        let (ph, pw) = (th.min(hh), tw.min(hw));
        let pooled = if (ph, pw) != (hh, hw) { tape.adaptive_max_pool(h, ph, pw)? } else { h };
        let projected = if c == self.target_channels {
            pooled
        } else {
            let proj = self
                .projections
                .get(&tag)
                .ok_or_else(|| contract_err!("site {} has no projection for {tag} ({c} channels)", self.site))?;
            let w = params.get(*proj);
            if tape.shape(w)[1] != c {
                return Err(shape_err!("projection for {tag} expects {} channels, got {c}", tape.shape(w)[1]));
            }
            tape.conv2d(pooled, w, None, Padding::Same)?
        };
        if (ph, pw) != (th, tw) {
            tape.bilinear_resize(projected, th, tw)
        } else {
            Ok(projected)
        }
    }

    pub fn attend(&self, tape: &mut Tape, params: &BoundParams, pool: &HistoryPool, x: Var) -> Result<(Var, AttentionTrace)> {
        self.attend_with(tape, params, pool, x, false)
    }

    /// Aggregates `[align(h_1); …; align(h_K); x]` with per-position softmax
    /// weights. With `per_sample` the trace also keeps the unaveraged weights.
    pub fn attend_with(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        pool: &HistoryPool,
        x: Var,
        per_sample: bool,
    ) -> Result<(Var, AttentionTrace)> {
        let [b, c, h, w] = tape.dims4(x)?;
        if c != self.target_channels || self.target_hw.is_some_and(|t| t != (h, w)) {
            return Err(contract_err!(
                "site {} expects [B, {}, {:?}], got [{b}, {c}, {h}, {w}]",
                self.site,
                self.target_channels,
                self.target_hw
            ));
        }
        let mut sources: Vec<EntrySource> = pool.tags().into_iter().map(EntrySource::History).collect();
        sources.push(EntrySource::Current(self.site));
        if pool.is_empty() {
            let ones = Tensor::full([1, b, h, w], 1.0);
            return Ok((x, AttentionTrace::from_weights(self.site, sources, &ones, per_sample)));
        }

        let mut stack = Vec::with_capacity(pool.len() + 1);
        for &(tag, v) in pool.entries() {
            stack.push(self.align_to(tape, params, v, tag, (h, w))?);
        }
        stack.push(x);
        let entries = stack.len();
        let values = tape.concat_batch(&stack)?;
        let logits = tape.rms_query_logits(values, params.get(self.rms_gain), params.get(self.pseudo_query), self.rms_epsilon)?;
        let logits = tape.reshape(logits, &[entries, b, h, w])?;
        let alpha = tape.softmax(logits, 0)?;
        let out = tape.weighted_sum(values, alpha, entries)?;
        let trace = AttentionTrace::from_weights(self.site, sources, tape.value(alpha), per_sample);
        Ok((out, trace))
    }
}

/// Spatial resize to `(th, tw)`: adaptive max pooling where the source is
/// larger, bilinear interpolation where it is smaller, nothing when equal.
pub fn resize(tape: &mut Tape, v: Var, th: usize, tw: usize) -> Result<Var> {
    let [_, _, h, w] = tape.dims4(v)?;
    if (h, w) == (th, tw) {
        return Ok(v);
    }
    let (ph, pw) = (th.min(h), tw.min(w));
    let pooled = if (ph, pw) != (h, w) { tape.adaptive_max_pool(v, ph, pw)? } else { v };
    if (ph, pw) != (th, tw) {
        tape.bilinear_resize(pooled, th, tw)
    } else {
        Ok(pooled)
    }
}
