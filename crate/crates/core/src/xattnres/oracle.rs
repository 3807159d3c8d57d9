//! Scalar-loop reference for [`XAttnResUnit::attend`](super::XAttnResUnit::attend).
//!
//! Everything here is written out element by element and shares no code
//! with the tape kernels, so the two can be compared differentially.

use super::{StageTag, XAttnResUnit};
use crate::error::{contract_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

struct Map {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn from(t: &Tensor) -> Result<Self> {
        let [b, c, h, w] = t.dims4()?;
        Ok(Self { b, c, h, w, v: t.data().to_vec() })
    }

    fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((b * self.c + c) * self.h + y) * self.w + x]
    }
}

fn naive_max_pool(m: &Map, th: usize, tw: usize) -> Map {
    let mut v = vec![0.0; m.b * m.c * th * tw];
    for b in 0..m.b {
        for c in 0..m.c {
            for oy in 0..th {
                for ox in 0..tw {
                    let ys = (oy * m.h) as f64 / th as f64;
                    let ye = ((oy + 1) * m.h) as f64 / th as f64;
                    let xs = (ox * m.w) as f64 / tw as f64;
                    let xe = ((ox + 1) * m.w) as f64 / tw as f64;
                    let mut best = f64::NEG_INFINITY;
                    for y in ys.floor() as usize..ye.ceil() as usize {
                        for x in xs.floor() as usize..xe.ceil() as usize {
                            best = best.max(m.get(b, c, y, x));
                        }
                    }
                    v[((b * m.c + c) * th + oy) * tw + ox] = best;
                }
            }
        }
    }
    Map { b: m.b, c: m.c, h: th, w: tw, v }
}

fn naive_bilinear(m: &Map, th: usize, tw: usize) -> Map {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let mut s = (i as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5;
        if s < 0.0 {
            s = 0.0;
        }
        if s > (n_in - 1) as f64 {
            s = (n_in - 1) as f64;
        }
        let lo = s.floor() as usize;
        let hi = if lo + 1 < n_in { lo + 1 } else { n_in - 1 };
        (lo, hi, s - lo as f64)
    };
    let mut v = vec![0.0; m.b * m.c * th * tw];
    for b in 0..m.b {
        for c in 0..m.c {
            for oy in 0..th {
                let (y0, y1, fy) = coord(oy, m.h, th);
                for ox in 0..tw {
                    let (x0, x1, fx) = coord(ox, m.w, tw);
                    let val = (1.0 - fy) * (1.0 - fx) * m.get(b, c, y0, x0)
                        + (1.0 - fy) * fx * m.get(b, c, y0, x1)
                        + fy * (1.0 - fx) * m.get(b, c, y1, x0)
                        + fy * fx * m.get(b, c, y1, x1);
                    v[((b * m.c + c) * th + oy) * tw + ox] = val;
                }
            }
        }
    }
    Map { b: m.b, c: m.c, h: th, w: tw, v }
}

fn naive_align(m: Map, tag: StageTag, unit: &XAttnResUnit, params: &ParamStore, (th, tw): (usize, usize)) -> Result<Map> {
    let mut m = m;
    if m.h > th || m.w > tw {
        let (ph, pw) = (m.h.min(th), m.w.min(tw));
        m = naive_max_pool(&m, ph, pw);
    }
    if m.h < th || m.w < tw {
        m = naive_bilinear(&m, th, tw);
    }
    if m.c == unit.target_channels {
        return Ok(m);
    }
    let id = unit.projections.get(&tag).ok_or_else(|| contract_err!("no projection for {tag}"))?;
    let wt = params.get(*id).data();
    let oc = unit.target_channels;
    let mut v = vec![0.0; m.b * oc * th * tw];
    for b in 0..m.b {
        for o in 0..oc {
            for y in 0..th {
                for x in 0..tw {
                    let mut s = 0.0;
                    for i in 0..m.c {
                        s += wt[o * m.c + i] * m.get(b, i, y, x);
                    }
                    v[((b * oc + o) * th + y) * tw + x] = s;
                }
            }
        }
    }
    Ok(Map { b: m.b, c: oc, h: th, w: tw, v })
}

/// Reference output of `unit.attend` for pooled `entries` and current `x`.
pub fn naive_attend_oracle(
    entries: &[(StageTag, Tensor)],
    x: &Tensor,
    unit: &XAttnResUnit,
    params: &ParamStore,
) -> Result<Tensor> {
    let xm = Map::from(x)?;
    let target = (xm.h, xm.w);
    if xm.c != unit.target_channels || unit.target_hw.is_some_and(|t| t != target) {
        return Err(contract_err!("oracle input does not match the unit's target shape"));
    }
    let mut stack = Vec::new();
    for (tag, t) in entries {
        stack.push(naive_align(Map::from(t)?, *tag, unit, params, target)?);
    }
    stack.push(xm);

    let query = params.get(unit.pseudo_query).data();
    let gain = params.get(unit.rms_gain).data();
    let eps = unit.rms_epsilon;
    let (b_n, c_n, h_n, w_n) = (x.shape()[0], unit.target_channels, target.0, target.1);
    let mut out = vec![0.0; b_n * c_n * h_n * w_n];
    for b in 0..b_n {
        for y in 0..h_n {
            for x in 0..w_n {
                let mut logits = Vec::with_capacity(stack.len());
                for e in &stack {
                    let mut sq = 0.0;
                    for c in 0..c_n {
                        let v = e.get(b, c, y, x);
                        sq += v * v;
                    }
                    let denom = (sq / c_n as f64 + eps).sqrt();
                    let mut l = 0.0;
                    for c in 0..c_n {
                        let key = if denom > 0.0 { e.get(b, c, y, x) / denom * gain[c] } else { 0.0 };
                        l += query[c] * key;
                    }
                    logits.push(l);
                }
                let mut top = logits[0];
                for &l in &logits {
                    if l > top {
                        top = l;
                    }
                }
                let mut z = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - top).exp();
                    z += *l;
                }
                for c in 0..c_n {
                    let mut s = 0.0;
                    for (e, &ex) in stack.iter().zip(&logits) {
                        s += ex / z * e.get(b, c, y, x);
                    }
                    out[((b * c_n + c) * h_n + y) * w_n + x] = s;
                }
            }
        }
    }
    Tensor::new([b_n, c_n, h_n, w_n], out)
}
