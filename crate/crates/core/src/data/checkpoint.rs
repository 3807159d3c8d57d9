//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XATR" version:u8
//! config_len:u32 config:utf8        key=value lines of the backbone config
//! count:u32 { name_len:u16 name ndim:u8 dims:u32* values:f64* }*
//! has_optimizer:u8 [ lr wd beta1 beta2 eps:f64 single:u8 step:u64 { m:f64* v:f64* }* ]
//! ```

use std::io::Write;
use std::path::Path;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Precision, Tensor};
use crate::training::{AdamW, AdamWConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XATR";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// Rebuilds the backbone from the stored config and restores its parameters.
    pub fn restore(&self) -> Result<Backbone> {
        let mut b = Backbone::build(self.config.clone())?;
        self.apply_to(&mut b)?;
        Ok(b)
    }

    /// Copies stored parameters into `backbone`, which must have exactly
    /// the same parameter names and shapes.
    pub fn apply_to(&self, backbone: &mut Backbone) -> Result<()> {
        let stored: Vec<(&str, &Tensor)> = self.params.iter().collect();
        let target: Vec<(&str, &Tensor)> = backbone.params.iter().collect();
        if stored.len() != target.len() {
            return Err(shape_err!("checkpoint has {} parameters, backbone has {}", stored.len(), target.len()));
        }
        for ((sn, st), (tn, tt)) in stored.iter().zip(&target) {
            if sn != tn || st.shape() != tt.shape() {
                return Err(shape_err!("checkpoint parameter {sn} {:?} does not match backbone parameter {tn} {:?}", st.shape(), tt.shape()));
            }
        }
        backbone.params.copy_values_from(&self.params)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(config: &BackboneConfig, params: &ParamStore, optimizer: Option<&AdamW>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    let text: String = config.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        let n = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("parameter name {name} too long")))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        put_f64s(&mut out, t.data());
    }
    match optimizer {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            let c = o.config;
            put_f64s(&mut out, &[c.learning_rate, c.weight_decay, c.beta1, c.beta2, c.epsilon]);
            out.push(u8::from(o.precision == Precision::Single));
            out.extend_from_slice(&o.step.to_le_bytes());
            for (m, v) in o.m.iter().zip(&o.v) {
                put_f64s(&mut out, m);
                put_f64s(&mut out, v);
            }
        }
    }
    Ok(out)
}

/// Writes atomically: the bytes go to a sibling temp file that is renamed
/// over `path`.
pub fn save_checkpoint(backbone: &Backbone, optimizer: Option<&AdamW>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(&backbone.config, &backbone.params, optimizer)?;
    let mut tmp_name = path.file_name().ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {} reading {what}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")) as usize)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.get(..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let mut config = BackboneConfig::default();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad config line '{line}'")))?;
        if !config.set(k, v).map_err(|e| Error::Checkpoint(e.to_string()))? {
            return Err(Error::Checkpoint(format!("unknown config key '{k}'")));
        }
    }
    let count = r.u32("parameter count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = r.u16("name length")?;
        let name = std::str::from_utf8(r.take(n, "name")?).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?.to_string();
        let ndim = r.u8("rank")? as usize;
        let dims = (0..ndim).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        let vals = r.f64s(numel, &name)?;
        params.add(name, Tensor::new(dims, vals).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let h = r.f64s(5, "optimizer settings")?;
            let config = AdamWConfig { learning_rate: h[0], weight_decay: h[1], beta1: h[2], beta2: h[3], epsilon: h[4] };
            let mut o = AdamW::new(config, &params);
            o.precision = if r.u8("precision")? == 1 { Precision::Single } else { Precision::Double };
            o.step = r.u64("step")?;
            for k in 0..o.m.len() {
                let n = o.m[k].len();
                o.m[k] = r.f64s(n, "first moment")?;
                o.v[k] = r.f64s(n, "second moment")?;
            }
            Some(o)
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, params, optimizer })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Routing;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = BackboneConfig { routing: Routing::Both, seed: 5, base_channels: 2, ..BackboneConfig::default() };
        let b = Backbone::build(cfg).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &b.params);
        opt.step = 7;
        opt.m[0][0] = 0.25;
        save_checkpoint(&b, Some(&opt), &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.config, b.config);
        assert_eq!(ck.params, b.params);
        assert_eq!(ck.optimizer.as_ref(), Some(&opt));
        let x = Tensor::new([1, 1, 8, 8], (0..64).map(|i| (i as f64).sin()).collect()).unwrap();
        let before = b.infer(&x).unwrap().0;
        let after = ck.restore().unwrap().infer(&x).unwrap().0;
        assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(!dir.path().join("m.ckpt.tmp").exists());
    }

    #[test]
    fn mismatched_backbone_is_rejected() {
        let b = Backbone::build(BackboneConfig { base_channels: 2, ..BackboneConfig::default() }).unwrap();
        let ck = decode_checkpoint(&encode_checkpoint(&b.config, &b.params, None).unwrap()).unwrap();
        let mut other = Backbone::build(BackboneConfig { base_channels: 3, ..BackboneConfig::default() }).unwrap();
        assert!(matches!(ck.apply_to(&mut other), Err(Error::Shape(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let b = Backbone::build(BackboneConfig { base_channels: 1, ..BackboneConfig::default() }).unwrap();
        let good = encode_checkpoint(&b.config, &b.params, None).unwrap();
        let mut bad = good.clone();
        bad[0] = b'Y';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(decode_checkpoint(&good[..good.len() - 3]).is_err());
    }
}
