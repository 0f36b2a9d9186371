//! Bilinear resizing with half-pixel centers and border clamping.
//!
//! Output pixel `i` samples source coordinate `(i + 0.5) * src / dst - 0.5`,
//! clamped to `[0, src - 1]`. Downsampling uses the same formula, with no
//! anti-alias prefilter, so a down-then-up round trip loses information.
//! [`roundtrip_distortion`] measures that loss.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Target size of a resize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResizeSpec {
    pub target_h: usize,
    pub target_w: usize,
}

impl ResizeSpec {
    pub fn new(target_h: usize, target_w: usize) -> Result<Self> {
        if target_h == 0 || target_w == 0 {
            return Err(Error::InvalidInput(format!(
                "resize target must be at least 1x1, got {target_h}x{target_w}"
            )));
        }
        Ok(ResizeSpec { target_h, target_w })
    }
}

/// Interpolation taps along one axis: for each output index, the two source
/// indices and the weight of the second one.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn axis_taps(src: usize, dst: usize) -> AxisTaps {
    let scale = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for i in 0..dst {
        let coord = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
        let lo = coord.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(coord - lo as f64);
    }
    taps
}

/// `a + t * (b - a)`, kept inside `[min(a, b), max(a, b)]` so constants map to
/// themselves exactly and rounding never leaves the input range.
#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    let v = a + t * (b - a);
    v.max(a.min(b)).min(a.max(b))
}

/// Resize `planes` contiguous `src_h x src_w` planes.
pub(crate) fn bilinear_planes<T: Scalar>(
    x: &[T],
    planes: usize,
    (src_h, src_w): (usize, usize),
    (dst_h, dst_w): (usize, usize),
) -> Vec<T> {
    if (src_h, src_w) == (dst_h, dst_w) {
        return x.to_vec();
    }
    let ty = axis_taps(src_h, dst_h);
    let tx = axis_taps(src_w, dst_w);
    let fx: Vec<T> = tx.frac.iter().map(|&f| T::of(f)).collect();
    let mut out = Vec::with_capacity(planes * dst_h * dst_w);
    for p in 0..planes {
        let plane = &x[p * src_h * src_w..(p + 1) * src_h * src_w];
        for oy in 0..dst_h {
            let r0 = &plane[ty.lo[oy] * src_w..(ty.lo[oy] + 1) * src_w];
            let r1 = &plane[ty.hi[oy] * src_w..(ty.hi[oy] + 1) * src_w];
            let fy = T::of(ty.frac[oy]);
            for ox in 0..dst_w {
                let top = lerp(r0[tx.lo[ox]], r0[tx.hi[ox]], fx[ox]);
                let bottom = lerp(r1[tx.lo[ox]], r1[tx.hi[ox]], fx[ox]);
                out.push(lerp(top, bottom, fy));
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_planes`]: scatter output gradients back onto the source grid.
pub(crate) fn bilinear_planes_backward<T: Scalar>(
    grad: &[T],
    planes: usize,
    (src_h, src_w): (usize, usize),
    (dst_h, dst_w): (usize, usize),
) -> Vec<T> {
    if (src_h, src_w) == (dst_h, dst_w) {
        return grad.to_vec();
    }
    let ty = axis_taps(src_h, dst_h);
    let tx = axis_taps(src_w, dst_w);
    let mut dx = vec![T::zero(); planes * src_h * src_w];
    for p in 0..planes {
        let gp = &grad[p * dst_h * dst_w..(p + 1) * dst_h * dst_w];
        let dp = &mut dx[p * src_h * src_w..(p + 1) * src_h * src_w];
        for oy in 0..dst_h {
            let fy = T::of(ty.frac[oy]);
            let (y0, y1) = (ty.lo[oy] * src_w, ty.hi[oy] * src_w);
            for ox in 0..dst_w {
                let g = gp[oy * dst_w + ox];
                let fx = T::of(tx.frac[ox]);
                let (x0, x1) = (tx.lo[ox], tx.hi[ox]);
                let top = g * (T::one() - fy);
                let bottom = g * fy;
                dp[y0 + x0] = dp[y0 + x0] + top * (T::one() - fx);
                dp[y0 + x1] = dp[y0 + x1] + top * fx;
                dp[y1 + x0] = dp[y1 + x0] + bottom * (T::one() - fx);
                dp[y1 + x1] = dp[y1 + x1] + bottom * fx;
            }
        }
    }
    dx
}

/// Resize the two trailing axes of a tensor with at least two dimensions.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, spec: ResizeSpec) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "bilinear_resize needs at least 2 dims, got {shape:?}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.numel() / (h * w);
    let data = bilinear_planes(x.data(), planes, (h, w), (spec.target_h, spec.target_w));
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = spec.target_h;
    out_shape[n - 1] = spec.target_w;
    Tensor::new(out_shape, data)
}

/// Mean absolute error between `x` and `x` resized to `intermediate` and back.
pub fn roundtrip_distortion<T: Scalar>(x: &Tensor<T>, intermediate: ResizeSpec) -> Result<f64> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "roundtrip_distortion needs at least 2 dims, got {shape:?}"
        )));
    }
    let original = ResizeSpec::new(shape[shape.len() - 2], shape[shape.len() - 1])?;
    let there = bilinear_resize(x, intermediate)?;
    let back = bilinear_resize(&there, original)?;
    let total: f64 = x
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(total / x.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_fn([1, 2, 3, 5], |i| (i as f64).sin());
        let y = bilinear_resize(&x, ResizeSpec::new(3, 5).unwrap()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn upsample_2x2_to_4x4_by_hand() {
        // Source coords for a 2 -> 4 upsample: -0.25, 0.25, 0.75, 1.25, clamped to [0, 1].
        let x = t(&[1, 1, 2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let up = bilinear_resize(&x, ResizeSpec::new(4, 4).unwrap()).unwrap();
        let row = |r: &[f64]| r.to_vec();
        let d = up.data();
        assert_eq!(row(&d[0..4]), vec![0.0, 0.25, 0.75, 1.0]);
        assert_eq!(row(&d[4..8]), vec![0.25, 0.375, 0.625, 0.75]);
        assert_eq!(row(&d[8..12]), vec![0.75, 0.625, 0.375, 0.25]);
        assert_eq!(row(&d[12..16]), vec![1.0, 0.75, 0.25, 0.0]);

        // Downsampling 4 -> 2 samples coords 0.5 and 2.5.
        let back = bilinear_resize(&up, ResizeSpec::new(2, 2).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.21875, 0.78125, 0.78125, 0.21875]);
        let mae = roundtrip_distortion(&x, ResizeSpec::new(4, 4).unwrap()).unwrap();
        assert!((mae - 0.21875).abs() < 1e-15);
    }

    #[test]
    fn checkerboard_loses_information_through_half_size() {
        let x = Tensor::from_fn([8, 8], |i| ((i / 8 + i % 8) % 2) as f64);
        // Each 2x2 block averages to 0.5, which upsamples back to a flat 0.5 field.
        let mae = roundtrip_distortion(&x, ResizeSpec::new(4, 4).unwrap()).unwrap();
        assert_eq!(mae, 0.5);
    }

    #[test]
    fn zero_target_rejected() {
        assert!(ResizeSpec::new(0, 3).is_err());
    }

    proptest! {
        #[test]
        fn constant_fields_stay_constant(
            c in -10.0f64..10.0, h in 1usize..9, w in 1usize..9, th in 1usize..17, tw in 1usize..17,
        ) {
            let x = Tensor::full([1, 1, h, w], c);
            let y = bilinear_resize(&x, ResizeSpec::new(th, tw).unwrap()).unwrap();
            prop_assert!(y.data().iter().all(|&v| v == c));
            let d = roundtrip_distortion(&x, ResizeSpec::new(th, tw).unwrap()).unwrap();
            prop_assert_eq!(d, 0.0);
        }

        #[test]
        fn output_within_input_range(
            seed in 0u64..1000, h in 1usize..9, w in 1usize..9, th in 1usize..17, tw in 1usize..17,
        ) {
            let x = Tensor::from_fn([h, w], |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 100.0 - 5.0);
            let lo = x.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = x.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let y = bilinear_resize(&x, ResizeSpec::new(th, tw).unwrap()).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
