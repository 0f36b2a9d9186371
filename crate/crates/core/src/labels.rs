//! Binary labels and the boundary-band partition used by eroded supervision.
//!
//! For a mask and radius `r`, the band `E` is `dilate_r(mask) & !erode_r(mask)`
//! with the 4-neighbour cross as structuring element, applied `r` times, and
//! replicate border handling. It is a band of half-width `r` straddling the
//! foreground contour. The kept set is `C = X - E`.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Strictly binary `height x width` mask; values are 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!("mask value {v} is not binary")));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn not(&self) -> Self {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// `true` if every pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            [self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("mask dims are nonzero")
    }

    /// 8-bit rendering: 0 or 255.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }
}

/// Threshold a map with values in `[0, 1]`: `value >= threshold` becomes 1.
pub fn binarize<T: Scalar>(gray: &[T], height: usize, width: usize, threshold: f64) -> Result<BinaryMask> {
    let t = T::of(threshold);
    BinaryMask::new(height, width, gray.iter().map(|&v| (v >= t) as u8).collect())
}

/// Threshold an 8-bit map at `threshold / 255` (so 128 with threshold 128 is foreground).
pub fn binarize_gray8(gray: &[u8], height: usize, width: usize, threshold: u8) -> Result<BinaryMask> {
    BinaryMask::new(height, width, gray.iter().map(|&v| (v >= threshold) as u8).collect())
}

/// The partition `X = E + C` of a mask's pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeBandPartition {
    /// Membership in the boundary band `E`.
    pub band: BinaryMask,
    pub radius: usize,
}

impl EdgeBandPartition {
    /// Partition with an empty band: every pixel is kept.
    pub fn keep_all(height: usize, width: usize) -> Self {
        EdgeBandPartition {
            band: BinaryMask::zeros(height, width),
            radius: 0,
        }
    }

    /// Membership in the kept set `C`.
    pub fn keep(&self) -> BinaryMask {
        self.band.not()
    }

    pub fn band_len(&self) -> usize {
        self.band.count()
    }

    pub fn keep_len(&self) -> usize {
        self.band.data.len() - self.band.count()
    }
}

/// One 4-neighbour step. `grow` selects dilation (any neighbour set) or
/// erosion (all neighbours set). Out-of-range neighbours replicate the
/// border, which is the same as ignoring them.
fn cross_step(mask: &BinaryMask, grow: bool) -> BinaryMask {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = mask.get(y, x);
            let neighbours = [
                (y > 0).then(|| (y - 1, x)),
                (y + 1 < h).then(|| (y + 1, x)),
                (x > 0).then(|| (y, x - 1)),
                (x + 1 < w).then(|| (y, x + 1)),
            ];
            for (ny, nx) in neighbours.into_iter().flatten() {
                let v = mask.get(ny, nx);
                acc = if grow { acc || v } else { acc && v };
            }
            out.push(acc as u8);
        }
    }
    BinaryMask {
        height: h,
        width: w,
        data: out,
    }
}

pub fn dilate(mask: &BinaryMask, r: usize) -> BinaryMask {
    (0..r).fold(mask.clone(), |m, _| cross_step(&m, true))
}

pub fn erode(mask: &BinaryMask, r: usize) -> BinaryMask {
    (0..r).fold(mask.clone(), |m, _| cross_step(&m, false))
}

/// Boundary band of half-width `r` by iterated morphology.
pub fn edge_band(mask: &BinaryMask, r: usize) -> EdgeBandPartition {
    if r == 0 {
        return EdgeBandPartition::keep_all(mask.height, mask.width);
    }
    let grown = dilate(mask, r);
    let shrunk = erode(mask, r);
    let data = grown
        .data
        .iter()
        .zip(&shrunk.data)
        .map(|(&d, &e)| d & (1 - e))
        .collect();
    EdgeBandPartition {
        band: BinaryMask {
            height: mask.height,
            width: mask.width,
            data,
        },
        radius: r,
    }
}

/// Boundary band by exhaustive scan: a pixel is in `E` when some pixel of the
/// opposite value lies within city-block distance `r`.
pub fn edge_band_oracle(mask: &BinaryMask, r: usize) -> EdgeBandPartition {
    let (h, w) = (mask.height, mask.width);
    let band = BinaryMask::from_fn(h, w, |y, x| {
        let own = mask.get(y, x);
        (0..h).any(|qy| {
            (0..w).any(|qx| mask.get(qy, qx) != own && y.abs_diff(qy) + x.abs_diff(qx) <= r)
        })
    });
    EdgeBandPartition { band, radius: r }
}

/// City-block distance from every pixel to the nearest pixel of opposite
/// value, by multi-source BFS. `usize::MAX` where no opposite pixel exists.
pub fn opposite_distance(mask: &BinaryMask) -> Vec<usize> {
    let (h, w) = (mask.height, mask.width);
    let mut dist = vec![usize::MAX; h * w];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let v = mask.get(y, x);
            let touches = [
                (y > 0).then(|| (y - 1, x)),
                (y + 1 < h).then(|| (y + 1, x)),
                (x > 0).then(|| (y, x - 1)),
                (x + 1 < w).then(|| (y, x + 1)),
            ]
            .into_iter()
            .flatten()
            .any(|(ny, nx)| mask.get(ny, nx) != v);
            if touches {
                dist[y * w + x] = 1;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let d = dist[y * w + x];
        for (ny, nx) in [
            (y > 0).then(|| (y - 1, x)),
            (y + 1 < h).then(|| (y + 1, x)),
            (x > 0).then(|| (y, x - 1)),
            (x + 1 < w).then(|| (y, x + 1)),
        ]
        .into_iter()
        .flatten()
        {
            // Only spread within the same label; the nearest opposite pixel of a
            // same-label neighbour is at most one step further away.
            if mask.get(ny, nx) == mask.get(y, x) && dist[ny * w + nx] == usize::MAX {
                dist[ny * w + nx] = d + 1;
                queue.push_back((ny, nx));
            }
        }
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn centered_square() -> BinaryMask {
        BinaryMask::from_fn(5, 5, |y, x| (1..=3).contains(&y) && (1..=3).contains(&x))
    }

    #[test]
    fn radius_zero_keeps_everything() {
        let p = edge_band(&centered_square(), 0);
        assert_eq!(p.band_len(), 0);
        assert_eq!(p.keep_len(), 25);
    }

    #[test]
    fn square_band_by_hand() {
        let p = edge_band(&centered_square(), 1);
        assert_eq!(p.band_len(), 20);
        let keep = p.keep();
        let kept: Vec<_> = (0..25).filter(|&i| keep.data()[i] == 1).collect();
        assert_eq!(kept, vec![0, 4, 12, 20, 24]);
        assert_eq!(p, edge_band_oracle(&centered_square(), 1));
    }

    #[test]
    fn uniform_masks_have_empty_bands() {
        for r in 0..4 {
            assert_eq!(edge_band(&BinaryMask::zeros(6, 7), r).band_len(), 0);
            assert_eq!(edge_band(&BinaryMask::zeros(6, 7).not(), r).band_len(), 0);
            assert_eq!(edge_band_oracle(&BinaryMask::zeros(6, 7).not(), r).band_len(), 0);
        }
    }

    #[test]
    fn single_pixel_gives_plus() {
        let m = BinaryMask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        let p = edge_band_oracle(&m, 1);
        let expected = BinaryMask::from_fn(5, 5, |y, x| y.abs_diff(2) + x.abs_diff(2) <= 1);
        assert_eq!(p.band, expected);
        assert_eq!(edge_band(&m, 1).band, expected);
    }

    #[test]
    fn binarize_tie_goes_up() {
        let m = binarize(&[0.0f32, 0.5, 0.49], 1, 3, 0.5).unwrap();
        assert_eq!(m.data(), &[0, 1, 0]);
        let m = binarize_gray8(&[127, 128, 255], 1, 3, 128).unwrap();
        assert_eq!(m.data(), &[0, 1, 1]);
        let z = binarize(&[0.0f64; 4], 2, 2, 0.5).unwrap();
        assert_eq!(z.count(), 0);
    }

    #[test]
    fn rejects_non_binary() {
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(BinaryMask::new(1, 2, vec![0]).is_err());
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..=1, h * w).prop_map(move |d| BinaryMask::new(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn morphology_matches_oracle(m in mask_strategy(), r in 0usize..=4) {
            let fast = edge_band(&m, r);
            prop_assert_eq!(&fast, &edge_band_oracle(&m, r));
            let dist = opposite_distance(&m);
            let via_bfs: Vec<u8> = dist.iter().map(|&d| (r > 0 && d <= r) as u8).collect();
            prop_assert_eq!(fast.band.data(), &via_bfs[..]);
        }

        #[test]
        fn band_properties(m in mask_strategy(), r in 0usize..=3) {
            let p = edge_band(&m, r);
            let next = edge_band(&m, r + 1);
            prop_assert!(p.band.is_subset_of(&next.band));
            prop_assert_eq!(p.band_len() + p.keep_len(), m.height() * m.width());
            prop_assert_eq!(edge_band(&m.not(), r), p);
        }
    }
}
