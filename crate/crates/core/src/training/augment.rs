use rand::Rng;

use crate::data::LabelMap;
use crate::error::Result;
use crate::tensor::Tensor;

/// Right-angle rotation followed by optional flips; a pure pixel permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Transform {
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl Transform {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self { quarter_turns: rng.random_range(0..4), flip_horizontal: rng.random(), flip_vertical: rng.random() }
    }

    /// Output size for an `h × w` plane.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source index of output pixel `(y, x)`.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> usize {
        let (oh, ow) = self.output_hw(h, w);
        let y = if self.flip_vertical { oh - 1 - y } else { y };
        let x = if self.flip_horizontal { ow - 1 - x } else { x };
        let (sy, sx) = match self.quarter_turns % 4 {
            0 => (y, x),
            1 => (x, w - 1 - y),
            2 => (h - 1 - y, w - 1 - x),
            _ => (h - 1 - x, y),
        };
        sy * w + sx
    }

    pub fn apply_plane<T: Copy>(&self, plane: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.output_hw(h, w);
        let mut out = Vec::with_capacity(plane.len());
        for y in 0..oh {
            for x in 0..ow {
                out.push(plane[self.source(y, x, h, w)]);
            }
        }
        out
    }

    /// Applies the transform to every plane of a `[B, C, H, W]` image and to the mask.
    pub fn apply(&self, image: &Tensor, mask: &LabelMap) -> Result<(Tensor, LabelMap)> {
        let [b, c, h, w] = image.dims4()?;
        let (oh, ow) = self.output_hw(h, w);
        let data = image.data().chunks_exact(h * w).flat_map(|p| self.apply_plane(p, h, w)).collect();
        let labels = self.apply_plane(&mask.labels, mask.height, mask.width);
        Ok((Tensor::new([b, c, oh, ow], data)?, LabelMap::new(oh, ow, labels)?))
    }
}

/// Draws a random right-angle rotation and flips and applies them to both
/// inputs. Non-square inputs only get half turns so their size is kept.
pub fn augment(image: &Tensor, mask: &LabelMap, rng: &mut impl Rng) -> Result<(Tensor, LabelMap)> {
    let mut t = Transform::random(rng);
    if mask.height != mask.width {
        t.quarter_turns &= !1;
    }
    t.apply(image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Tensor, LabelMap) {
        let img = Tensor::new([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        (img, LabelMap::new(2, 3, vec![0, 1, 2, 0, 0, 1]).unwrap())
    }

    #[test]
    fn quarter_turn_layout() {
        let (img, mask) = sample();
        let t = Transform { quarter_turns: 1, ..Transform::default() };
        let (out, m) = t.apply(&img, &mask).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 2]);
        // [[1,2,3],[4,5,6]] rotated counter-clockwise
        assert_eq!(out.data(), &[3.0, 6.0, 2.0, 5.0, 1.0, 4.0]);
        assert_eq!(m.labels, vec![2, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn involutions_and_cycles() {
        let (img, mask) = sample();
        let flip = Transform { flip_horizontal: true, ..Transform::default() };
        let (a, am) = flip.apply(&img, &mask).unwrap();
        assert_eq!(a.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        let (b, bm) = flip.apply(&a, &am).unwrap();
        assert_eq!((b, bm), (img.clone(), mask.clone()));
        let rot = Transform { quarter_turns: 1, ..Transform::default() };
        let (mut x, mut xm) = (img.clone(), mask.clone());
        for _ in 0..4 {
            (x, xm) = rot.apply(&x, &xm).unwrap();
        }
        assert_eq!((x, xm), (img, mask));
    }
}
