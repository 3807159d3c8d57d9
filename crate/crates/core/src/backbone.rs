//! Mini U-Net with selectable inter-stage routing.
//!
//! Stage widths double from `base_channels`; encoder stage `S` is the
//! bottleneck. Decoder stages are numbered in production order, so `dec1`
//! is the deepest one. Every stage output is appended to the history pool
//! whether or not any XAttnRes site will read it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{config_err, contract_err, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::named_rng;
use crate::tensor::{kernels::Padding, Tape, Tensor, Var};
use crate::xattnres::{AttentionTrace, HistoryPool, QueryInit, StageTag, XAttnResUnit};

pub const XATTN_PREFIX: &str = "xattn.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Routing {
    /// Fixed skip concatenation only.
    #[default]
    SkipOnly,
    /// Neither skips nor attention.
    NoSkip,
    /// Attention sites instead of skips.
    Replace,
    /// Attention sites alongside skips.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Position {
    /// No attention sites at all.
    None,
    EncoderOnly,
    DecoderOnly,
    #[default]
    Full,
}

/// Dataflow of a decoder stage under [`Routing::Both`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BothOrder {
    /// `f([attend(Up(x)); skip])`
    #[default]
    AttendThenConcat,
    /// `f(attend([Up(x); skip]))`
    ConcatThenAttend,
}

macro_rules! kebab_enum {
    ($ty:ty, $what:literal, { $($variant:path => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = crate::Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(config_err!(
                        concat!("unknown ", $what, " '{}' (expected one of: {})"),
                        other,
                        [$($name),+].join(", ")
                    )),
                }
            }
        }
    };
}

kebab_enum!(Routing, "routing", {
    Routing::SkipOnly => "skip-only",
    Routing::NoSkip => "no-skip",
    Routing::Replace => "replace",
    Routing::Both => "both",
});
kebab_enum!(Position, "position", {
    Position::None => "none",
    Position::EncoderOnly => "encoder-only",
    Position::DecoderOnly => "decoder-only",
    Position::Full => "full",
});
kebab_enum!(QueryInit, "init scheme", {
    QueryInit::ZeroInit => "zero",
    QueryInit::RandomNormal => "random-normal",
    QueryInit::KaimingUniform => "kaiming-uniform",
    QueryInit::XavierUniform => "xavier-uniform",
});
kebab_enum!(BothOrder, "both-mode order", {
    BothOrder::AttendThenConcat => "attend-then-concat",
    BothOrder::ConcatThenAttend => "concat-then-attend",
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub routing: Routing,
    pub position: Position,
    pub init_scheme: QueryInit,
    pub both_order: BothOrder,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            base_channels: 8,
            in_channels: 1,
            num_classes: 4,
            routing: Routing::SkipOnly,
            position: Position::Full,
            init_scheme: QueryInit::ZeroInit,
            both_order: BothOrder::AttendThenConcat,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(config_err!("need at least 2 stages, got {}", self.stages));
        }
        if self.base_channels < 1 {
            return Err(config_err!("base_channels must be at least 1"));
        }
        if self.in_channels < 1 || self.num_classes < 1 {
            return Err(config_err!("in_channels and num_classes must be positive"));
        }
        if self.stages > 16 {
            return Err(config_err!("{} stages is more than the network supports", self.stages));
        }
        Ok(())
    }

    /// Output width of encoder stage `i` (1-based), which is also the width
    /// of the decoder stage at that resolution.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    fn has_sites(&self) -> bool {
        matches!(self.routing, Routing::Replace | Routing::Both)
    }

    pub fn encoder_sites(&self) -> bool {
        self.has_sites() && matches!(self.position, Position::EncoderOnly | Position::Full)
    }

    pub fn decoder_sites(&self) -> bool {
        self.has_sites() && matches!(self.position, Position::DecoderOnly | Position::Full)
    }

    fn skips(&self) -> bool {
        matches!(self.routing, Routing::SkipOnly | Routing::Both)
    }

    /// Resolution level (1 = full size) of decoder stage `j`.
    pub fn decoder_level(&self, j: usize) -> usize {
        self.stages - j
    }

    /// `key=value` form used by config files and checkpoints.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stages", self.stages.to_string()),
            ("base-channels", self.base_channels.to_string()),
            ("in-channels", self.in_channels.to_string()),
            ("num-classes", self.num_classes.to_string()),
            ("routing", self.routing.to_string()),
            ("position", self.position.to_string()),
            ("init", self.init_scheme.to_string()),
            ("both-order", self.both_order.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field by its kebab-case key. Returns `false` for keys that
    /// are not backbone fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| v.trim().parse::<usize>().map_err(|_| config_err!("{key}: '{v}' is not a non-negative integer"));
        match key {
            "stages" => self.stages = int(value)?,
            "base-channels" => self.base_channels = int(value)?,
            "in-channels" => self.in_channels = int(value)?,
            "num-classes" => self.num_classes = int(value)?,
            "routing" => self.routing = value.trim().parse()?,
            "position" => self.position = value.trim().parse()?,
            "init" => self.init_scheme = value.trim().parse()?,
            "both-order" => self.both_order = value.trim().parse()?,
            "seed" => self.seed = value.trim().parse().map_err(|_| config_err!("seed: '{value}' is not an integer"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Smallest input side length the network accepts, and the divisor all sides must share.
    pub fn size_divisor(&self) -> usize {
        1 << (self.stages - 1)
    }
}

/// Two 3×3 same-padding convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct StageBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
}

fn conv_params(store: &mut ParamStore, name: &str, out_c: usize, in_c: usize, k: usize, gain: f64, seed: u64) -> (ParamId, ParamId) {
    let wname = format!("{name}.weight");
    let mut rng = named_rng(seed, &wname);
    let fan_in = (in_c * k * k) as f64;
    let bound = (gain * 3.0 / fan_in).sqrt();
    let w = (0..out_c * in_c * k * k).map(|_| rng.random_range(-bound..bound)).collect();
    let w = store.add(wname, Tensor::new([out_c, in_c, k, k], w).expect("conv weight shape"));
    let b = store.add(format!("{name}.bias"), Tensor::zeros([out_c]));
    (w, b)
}

impl StageBlock {
    fn new(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, seed: u64) -> Self {
        let conv1 = conv_params(store, &format!("{name}.conv1"), out_c, in_c, 3, 2.0, seed);
        let conv2 = conv_params(store, &format!("{name}.conv2"), out_c, out_c, 3, 2.0, seed);
        Self { in_channels: in_c, out_channels: out_c, conv1, conv2 }
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let h = tape.conv2d(x, params.get(self.conv1.0), Some(params.get(self.conv1.1)), Padding::Same)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, params.get(self.conv2.0), Some(params.get(self.conv2.1)), Padding::Same)?;
        Ok(tape.relu(h))
    }
}

pub struct ForwardArtifacts {
    /// `[B, num_classes, H, W]`
    pub logits: Var,
    /// One per XAttnRes site, in execution order.
    pub traces: Vec<AttentionTrace>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
    encoders: Vec<StageBlock>,
    decoders: Vec<StageBlock>,
    head: (ParamId, ParamId),
    units: BTreeMap<StageTag, XAttnResUnit>,
}

impl Backbone {
    pub fn build(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let s = config.stages;
        let seed = config.seed;
        let mut params = ParamStore::new();
        let mut units = BTreeMap::new();
        // (tag, width) of every stage output, in production order
        let mut produced: Vec<(StageTag, usize)> = Vec::new();

        let mut encoders = Vec::with_capacity(s);
        for i in 1..=s {
            let in_c = if i == 1 { config.in_channels } else { config.width(i - 1) };
            let tag = StageTag::enc(i);
            if config.encoder_sites() {
                let unit = XAttnResUnit::new(&mut params, &format!("{XATTN_PREFIX}{tag}"), tag, in_c, None, &produced, config.init_scheme, seed);
                units.insert(tag, unit);
            }
            encoders.push(StageBlock::new(&mut params, &tag.to_string(), in_c, config.width(i), seed));
            produced.push((tag, config.width(i)));
        }

        let mut decoders = Vec::with_capacity(s - 1);
        for j in 1..s {
            let level = config.decoder_level(j);
            let up_c = config.width(level + 1);
            let skip_c = config.width(level);
            let tag = StageTag::dec(j);
            let concat_first = config.routing == Routing::Both && config.both_order == BothOrder::ConcatThenAttend;
            if config.decoder_sites() {
                let target_c = if concat_first { up_c + skip_c } else { up_c };
                let unit = XAttnResUnit::new(&mut params, &format!("{XATTN_PREFIX}{tag}"), tag, target_c, None, &produced, config.init_scheme, seed);
                units.insert(tag, unit);
            }
            let in_c = if config.skips() { up_c + skip_c } else { up_c };
            decoders.push(StageBlock::new(&mut params, &tag.to_string(), in_c, skip_c, seed));
            produced.push((tag, skip_c));
        }

        let head = conv_params(&mut params, "head", config.num_classes, config.width(1), 1, 1.0, seed);
        Ok(Self { config, params, encoders, decoders, head, units })
    }

    pub fn units(&self) -> impl Iterator<Item = &XAttnResUnit> {
        self.units.values()
    }

    pub fn unit(&self, site: StageTag) -> Option<&XAttnResUnit> {
        self.units.get(&site)
    }

    /// `(total, xattnres_overhead)` scalar parameter counts.
    pub fn parameter_count(&self) -> (usize, usize) {
        (self.params.numel(), self.params.numel_with_prefix(XATTN_PREFIX))
    }

    fn maybe_attend(
        &self,
        tag: StageTag,
        tape: &mut Tape,
        params: &BoundParams,
        pool: &HistoryPool,
        x: Var,
        per_sample: bool,
        traces: &mut Vec<AttentionTrace>,
    ) -> Result<Var> {
        match self.units.get(&tag) {
            Some(unit) => {
                let (out, trace) = unit.attend_with(tape, params, pool, x, per_sample)?;
                traces.push(trace);
                Ok(out)
            }
            None => Ok(x),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, images: Var) -> Result<ForwardArtifacts> {
        self.forward_with(tape, params, images, false)
    }

    /// Runs the network; `per_sample` keeps unaveraged attention weights in the traces.
    pub fn forward_with(&self, tape: &mut Tape, params: &BoundParams, images: Var, per_sample: bool) -> Result<ForwardArtifacts> {
        let [_, c, h, w] = tape.dims4(images)?;
        let div = self.config.size_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(contract_err!("input {h}x{w} is not divisible by {div}"));
        }
        if c != self.config.in_channels {
            return Err(contract_err!("expected {} input channels, got {c}", self.config.in_channels));
        }
        let mut pool = HistoryPool::new();
        let mut traces = Vec::new();
        let mut enc_out = Vec::with_capacity(self.encoders.len());

        let mut x = images;
        for (k, block) in self.encoders.iter().enumerate() {
            let tag = StageTag::enc(k + 1);
            if k > 0 {
                let [_, _, ph, pw] = tape.dims4(x)?;
                x = tape.adaptive_max_pool(x, ph / 2, pw / 2)?;
            }
            let inp = self.maybe_attend(tag, tape, params, &pool, x, per_sample, &mut traces)?;
            x = block.forward(tape, params, inp)?;
            pool.append(x, tag)?;
            enc_out.push(x);
        }

        for (k, block) in self.decoders.iter().enumerate() {
            let j = k + 1;
            let tag = StageTag::dec(j);
            let skip = enc_out[self.config.decoder_level(j) - 1];
            let [_, _, sh, sw] = tape.dims4(skip)?;
            let up = tape.bilinear_resize(x, sh, sw)?;
            let inp = match (self.config.routing, self.config.both_order) {
                (Routing::SkipOnly, _) => tape.concat_channels(up, skip)?,
                (Routing::NoSkip, _) => up,
                (Routing::Replace, _) => self.maybe_attend(tag, tape, params, &pool, up, per_sample, &mut traces)?,
                (Routing::Both, BothOrder::AttendThenConcat) => {
                    let a = self.maybe_attend(tag, tape, params, &pool, up, per_sample, &mut traces)?;
                    tape.concat_channels(a, skip)?
                }
                (Routing::Both, BothOrder::ConcatThenAttend) => {
                    let cat = tape.concat_channels(up, skip)?;
                    self.maybe_attend(tag, tape, params, &pool, cat, per_sample, &mut traces)?
                }
            };
            x = block.forward(tape, params, inp)?;
            pool.append(x, tag)?;
        }

        let logits = tape.conv2d(x, params.get(self.head.0), Some(params.get(self.head.1)), Padding::Same)?;
        Ok(ForwardArtifacts { logits, traces })
    }

    /// Gradient-free forward pass returning logits and traces.
    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Vec<AttentionTrace>)> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok((tape.value(out.logits).clone(), out.traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(routing: Routing, position: Position) -> BackboneConfig {
        BackboneConfig { routing, position, ..BackboneConfig::default() }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = BackboneConfig { stages: 1, ..BackboneConfig::default() };
        assert!(matches!(Backbone::build(bad), Err(crate::Error::Config(_))));
        let bad = BackboneConfig { base_channels: 0, ..BackboneConfig::default() };
        assert!(matches!(Backbone::build(bad), Err(crate::Error::Config(_))));
    }

    #[test]
    fn skip_only_has_no_units() {
        let b = Backbone::build(cfg(Routing::SkipOnly, Position::Full)).unwrap();
        assert_eq!(b.units().count(), 0);
        assert_eq!(b.parameter_count().1, 0);
    }

    #[test]
    fn replace_full_has_a_site_per_stage() {
        let b = Backbone::build(cfg(Routing::Replace, Position::Full)).unwrap();
        let sites: Vec<String> = b.units().map(|u| u.site.to_string()).collect();
        assert_eq!(sites, ["enc1", "enc2", "enc3", "dec1", "dec2"]);
        let enc_only = Backbone::build(cfg(Routing::Replace, Position::EncoderOnly)).unwrap();
        assert_eq!(enc_only.units().count(), 3);
        let dec_only = Backbone::build(cfg(Routing::Both, Position::DecoderOnly)).unwrap();
        assert_eq!(dec_only.units().count(), 2);
    }

    #[test]
    fn position_is_ignored_without_attention() {
        let a = Backbone::build(cfg(Routing::NoSkip, Position::Full)).unwrap();
        let b = Backbone::build(cfg(Routing::NoSkip, Position::EncoderOnly)).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_init_queries_are_zero() {
        let b = Backbone::build(cfg(Routing::Both, Position::Full)).unwrap();
        for u in b.units() {
            assert!(b.params.get(u.pseudo_query).data().iter().all(|&q| q == 0.0));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = BackboneConfig { init_scheme: QueryInit::KaimingUniform, seed: 11, ..cfg(Routing::Both, Position::Full) };
        assert_eq!(Backbone::build(c.clone()).unwrap().params, Backbone::build(c.clone()).unwrap().params);
        let other = BackboneConfig { seed: 12, ..c.clone() };
        assert_ne!(Backbone::build(c).unwrap().params, Backbone::build(other).unwrap().params);
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        for routing in [Routing::SkipOnly, Routing::NoSkip, Routing::Replace, Routing::Both] {
            let b = Backbone::build(cfg(routing, Position::Full)).unwrap();
            let (logits, _) = b.infer(&Tensor::zeros([1, 1, 8, 8])).unwrap();
            assert_eq!(logits.shape(), &[1, 4, 8, 8]);
            assert!(logits.data().iter().all(|&v| v == 0.0), "{routing}");
        }
    }

    #[test]
    fn decoder_pools_grow_by_one() {
        let b = Backbone::build(cfg(Routing::Replace, Position::Full)).unwrap();
        let img = Tensor::new([1, 1, 16, 16], (0..256).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap();
        let (_, traces) = b.infer(&img).unwrap();
        let k: Vec<(String, usize)> = traces.iter().map(|t| (t.site.to_string(), t.entries() - 1)).collect();
        let expect = [("enc1", 0), ("enc2", 1), ("enc3", 2), ("dec1", 3), ("dec2", 4)];
        assert_eq!(k, expect.map(|(s, n)| (s.to_string(), n)));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let b = Backbone::build(BackboneConfig::default()).unwrap();
        assert!(matches!(b.infer(&Tensor::zeros([1, 1, 10, 8])), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn enum_names_roundtrip() {
        for r in [Routing::SkipOnly, Routing::NoSkip, Routing::Replace, Routing::Both] {
            assert_eq!(r.to_string().parse::<Routing>().unwrap(), r);
        }
        for p in [Position::None, Position::EncoderOnly, Position::DecoderOnly, Position::Full] {
            assert_eq!(p.to_string().parse::<Position>().unwrap(), p);
        }
        assert!("sideways".parse::<Position>().is_err());
    }
}
