//! Segmentation metrics: Dice, IoU and the 95th-percentile Hausdorff
//! distance, plus multi-class reports over argmax label maps.
//!
//! Conventions for degenerate masks:
//! - Dice and IoU of two empty masks are 1.
//! - HD95 of two empty masks is 0; when exactly one is empty it is the
//!   image diagonal `√((H−1)² + (W−1)²)`.
//!
//! Boundaries use 4-connectivity: a foreground pixel is on the boundary if
//! it touches the image border or has a background 4-neighbour. HD95 is the
//! nearest-rank 95th percentile (the `⌈0.95·n⌉`-th smallest value) of both
//! directed boundary-distance sets pooled together, in pixels.

use crate::error::{shape_err, Result};

/// Binary mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("mask {height}x{width} with {} pixels", data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    /// One-vs-rest mask of `class` within a label map.
    pub fn from_labels(labels: &[usize], height: usize, width: usize, class: usize) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|&l| l == class).collect())
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn diagonal(&self) -> f64 {
        let (h, w) = ((self.height - 1) as f64, (self.width - 1) as f64);
        (h * h + w * w).sqrt()
    }

    /// Boundary pixels as `(y, x)` in row-major order.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                if edge || !self.get(y - 1, x) || !self.get(y + 1, x) || !self.get(y, x - 1) || !self.get(y, x + 1) {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(shape_err!("masks {}x{} and {}x{}", a.height, a.width, b.height, b.width));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    (inter, a.count(), b.count())
}

/// `2|P∩G| / (|P| + |G|)`.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

const FAR: i64 = i64::MAX / 4;

/// Exact squared Euclidean distance transform (separable lower-envelope
/// method) to the set of `true` cells of `sites`.
fn squared_edt(h: usize, w: usize, sites: &[bool]) -> Vec<i64> {
    let mut grid: Vec<i64> = sites.iter().map(|&s| if s { 0 } else { FAR }).collect();
    let mut buf = vec![0i64; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        let col = envelope_1d(&buf[..h]);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    for y in 0..h {
        let row = envelope_1d(&grid[y * w..(y + 1) * w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

fn envelope_1d(f: &[i64]) -> Vec<i64> {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q] < FAR).collect();
    if finite.is_empty() {
        return vec![FAR; n];
    }
    let sq = |q: usize| (q * q) as i64;
    // intersection abscissa of the parabolas rooted at p < q
    let cross = |p: usize, q: usize| ((f[q] + sq(q)) - (f[p] + sq(p))) as f64 / (2 * (q - p)) as f64;
    let mut roots: Vec<usize> = Vec::with_capacity(finite.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        while let Some(&p) = roots.last() {
            let s = cross(p, q);
            if s <= *bounds.last().expect("bounds track roots") {
                roots.pop();
                bounds.pop();
            } else {
                roots.push(q);
                bounds.push(s);
                break;
            }
        }
        if roots.is_empty() {
            roots.push(q);
            bounds.push(f64::NEG_INFINITY);
        }
    }
    let mut out = vec![0i64; n];
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < roots.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = roots[k];
        let d = q as i64 - p as i64;
        *o = d * d + f[p];
    }
    out
}

fn nearest_rank_95(mut d: Vec<f64>) -> f64 {
    d.sort_by(f64::total_cmp);
    let rank = (0.95 * d.len() as f64).ceil() as usize;
    d[rank.max(1) - 1]
}

fn boundary_grid(m: &Mask) -> Vec<bool> {
    let mut g = vec![false; m.data.len()];
    for (y, x) in m.boundary() {
        g[y * m.width + x] = true;
    }
    g
}

/// 95th-percentile symmetric boundary distance in pixels.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(pred.diagonal()),
        _ => {}
    }
    let (h, w) = (pred.height, pred.width);
    let to_gt = squared_edt(h, w, &boundary_grid(gt));
    let to_pred = squared_edt(h, w, &boundary_grid(pred));
    let mut d: Vec<f64> = pred.boundary().iter().map(|&(y, x)| (to_gt[y * w + x] as f64).sqrt()).collect();
    d.extend(gt.boundary().iter().map(|&(y, x)| (to_pred[y * w + x] as f64).sqrt()));
    Ok(nearest_rank_95(d))
}

/// All-pairs reference for [`hd95`]; quadratic in boundary length.
pub fn hd95_bruteforce_oracle(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape(pred, gt)?;
    let (bp, bg) = (pred.boundary(), gt.boundary());
    if bp.is_empty() && bg.is_empty() {
        return Ok(0.0);
    }
    if bp.is_empty() || bg.is_empty() {
        return Ok(pred.diagonal());
    }
    let nearest = |a: (usize, usize), set: &[(usize, usize)]| -> f64 {
        let mut best = i64::MAX;
        for &b in set {
            let dy = a.0 as i64 - b.0 as i64;
            let dx = a.1 as i64 - b.1 as i64;
            best = best.min(dy * dy + dx * dx);
        }
        (best as f64).sqrt()
    };
    let mut all = Vec::with_capacity(bp.len() + bg.len());
    for &a in &bp {
        all.push(nearest(a, &bg));
    }
    for &b in &bg {
        all.push(nearest(b, &bp));
    }
    all.sort_by(f64::total_cmp);
    let rank = (0.95 * all.len() as f64).ceil() as usize;
    Ok(all[rank - 1])
}

/// Counts of degenerate-mask conventions applied while building a report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmptyMaskFlags {
    /// Class absent from both prediction and ground truth.
    pub both_empty: usize,
    /// Class present in exactly one of them (HD95 set to the diagonal).
    pub one_empty: usize,
}

/// Per-class metrics averaged over samples. Means run over foreground
/// classes (1..K); the background entry is kept in the per-class lists.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_dice: Vec<f64>,
    pub mean_dice: f64,
    pub per_class_iou: Vec<f64>,
    pub mean_iou: f64,
    pub per_class_hd95: Vec<f64>,
    pub mean_hd95: f64,
    pub samples: usize,
    pub flags: EmptyMaskFlags,
}

fn fg_mean(v: &[f64]) -> f64 {
    let fg = if v.len() > 1 { &v[1..] } else { v };
    fg.iter().sum::<f64>() / fg.len() as f64
}

/// Accumulates one-vs-rest metrics over label-map pairs.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    num_classes: usize,
    dice: Vec<f64>,
    iou: Vec<f64>,
    hd: Vec<f64>,
    samples: usize,
    flags: EmptyMaskFlags,
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            dice: vec![0.0; num_classes],
            iou: vec![0.0; num_classes],
            hd: vec![0.0; num_classes],
            samples: 0,
            flags: EmptyMaskFlags::default(),
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize], height: usize, width: usize) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err!("prediction has {} pixels, ground truth {}", pred.len(), gt.len()));
        }
        for c in 0..self.num_classes {
            let p = Mask::from_labels(pred, height, width, c)?;
            let g = Mask::from_labels(gt, height, width, c)?;
            match (p.is_empty(), g.is_empty()) {
                (true, true) => self.flags.both_empty += 1,
                (true, false) | (false, true) => self.flags.one_empty += 1,
                _ => {}
            }
            self.dice[c] += dice(&p, &g)?;
            self.iou[c] += iou(&p, &g)?;
            self.hd[c] += hd95(&p, &g)?;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let n = self.samples.max(1) as f64;
        let avg = |v: &[f64]| v.iter().map(|x| x / n).collect::<Vec<_>>();
        let (d, i, h) = (avg(&self.dice), avg(&self.iou), avg(&self.hd));
        MetricsReport {
            mean_dice: fg_mean(&d),
            mean_iou: fg_mean(&i),
            mean_hd95: fg_mean(&h),
            per_class_dice: d,
            per_class_iou: i,
            per_class_hd95: h,
            samples: self.samples,
            flags: self.flags,
        }
    }
}

/// Argmax over the class axis of `[B, K, H, W]` logits, `[B·H·W]` labels.
pub fn argmax_labels(logits: &crate::Tensor) -> Result<Vec<usize>> {
    let [b, k, h, w] = logits.dims4()?;
    let plane = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * plane + p] > d[(bi * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::empty(h, w);
        for &(y, x) in on {
            m.set(y, x, true);
        }
        m
    }

    #[test]
    fn dice_hand_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let far = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice(&a, &far).unwrap(), 0.0);
        let half = mask(4, 4, &[(0, 0), (0, 1), (2, 2), (2, 3)]);
        assert_eq!(dice(&a, &half).unwrap(), 0.5);
        assert_eq!(dice(&Mask::empty(2, 2), &Mask::empty(2, 2)).unwrap(), 1.0);
        assert!(dice(&Mask::empty(2, 2), &Mask::empty(2, 3)).is_err());
    }

    #[test]
    fn iou_hand_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let b = mask(4, 4, &[(0, 2), (0, 3), (1, 0), (1, 1)]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        let d = dice(&a, &b).unwrap();
        assert!((iou(&a, &b).unwrap() - d / (2.0 - d)).abs() < 1e-12);
    }

    #[test]
    fn hd95_hand_cases() {
        let a = mask(8, 8, &[(0, 0)]);
        let b = mask(8, 8, &[(3, 4)]);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
        assert_eq!(hd95_bruteforce_oracle(&a, &b).unwrap(), 5.0);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        let gt = mask(64, 64, &[(10, 10)]);
        let diag = (63.0f64 * 63.0 * 2.0).sqrt();
        assert_eq!(hd95(&Mask::empty(64, 64), &gt).unwrap(), diag);
        assert!((diag - 89.095).abs() < 1e-3);
        assert_eq!(hd95(&Mask::empty(5, 5), &Mask::empty(5, 5)).unwrap(), 0.0);
    }

    #[test]
    fn boundary_is_four_connected() {
        let mut m = Mask::empty(5, 5);
        for y in 1..4 {
            for x in 1..4 {
                m.set(y, x, true);
            }
        }
        let b = m.boundary();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        let full = Mask::new(3, 3, vec![true; 9]).unwrap();
        assert_eq!(full.boundary().len(), 8);
    }

    #[test]
    fn edt_matches_brute_force() {
        let sites: Vec<bool> = (0..7 * 9).map(|i| i % 11 == 3 || i == 40).collect();
        let d = squared_edt(7, 9, &sites);
        for y in 0..7i64 {
            for x in 0..9i64 {
                let mut best = i64::MAX;
                for (k, &s) in sites.iter().enumerate() {
                    if s {
                        let (sy, sx) = ((k / 9) as i64, (k % 9) as i64);
                        best = best.min((y - sy).pow(2) + (x - sx).pow(2));
                    }
                }
                assert_eq!(d[(y * 9 + x) as usize], best);
            }
        }
    }

    #[test]
    fn report_means_exclude_background() {
        let gt = vec![0, 1, 1, 2];
        let mut acc = MetricsAccumulator::new(3);
        acc.add(&gt, &gt, 2, 2).unwrap();
        let r = acc.report();
        assert_eq!(r.mean_dice, 1.0);
        assert_eq!(r.mean_hd95, 0.0);
        let mut acc = MetricsAccumulator::new(3);
        acc.add(&[0, 0, 0, 0], &gt, 2, 2).unwrap();
        let r = acc.report();
        assert_eq!(r.mean_dice, 0.0);
        assert_eq!(r.flags.one_empty, 2);
    }
}
