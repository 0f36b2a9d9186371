//! 2-d convolution via im2col and a strided GEMM.

use super::Scalar;
use crate::error::{Error, Result};

/// Shapes and hyperparameters of one conv2d call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, in_channels, in_h, in_w] = match *input {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape(format!("conv2d input must be 4-d, got {input:?}"))),
        };
        let [out_channels, kc, kernel_h, kernel_w] = match *kernel {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape(format!("conv2d kernel must be 4-d, got {kernel:?}"))),
        };
        if kc != in_channels {
            return Err(Error::shape(format!(
                "conv2d kernel expects {kc} input channels, input has {in_channels}"
            )));
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel must have odd spatial size, got {kernel_h}x{kernel_w}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if in_h + 2 * padding < kernel_h || in_w + 2 * padding < kernel_w {
            return Err(Error::shape(format!(
                "conv2d kernel {kernel_h}x{kernel_w} larger than padded input {in_h}x{in_w} (+{padding})"
            )));
        }
        Ok(Conv2dGeometry {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - pad` lies
/// inside the image.
fn valid_cols(g: &Conv2dGeometry, kx: usize, ow: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).div_ceil(g.stride).min(ow);
    // Largest ox with ox * stride + kx < in_w + pad.
    let hi = if g.in_w + g.padding > kx {
        ((g.in_w + g.padding - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one sample `[Cin, H, W]` into columns `[Cin*kH*kW, H'*W']`.
fn im2col<T: Scalar>(g: &Conv2dGeometry, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let xc = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let (lo, hi) = valid_cols(g, kx, ow);
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let start = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, s) in drow[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into `dx` for one sample.
fn col2im<T: Scalar>(g: &Conv2dGeometry, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let (lo, hi) = valid_cols(g, kx, ow);
                    let start = lo * g.stride + kx - g.padding;
                    let srow = &src[oy * ow + lo..oy * ow + hi];
                    for (d, &s) in drow[start..].iter_mut().step_by(g.stride).zip(srow) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &Conv2dGeometry,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_channels,
            k,
            plane,
            T::one(),
            w,
            k as isize,
            1,
            cols_ref,
            plane as isize,
            1,
            beta,
            on,
            plane as isize,
            1,
        );
    }
    out
}

/// Gradients of conv2d with respect to input, kernel, and bias.
pub(crate) struct Conv2dGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &Conv2dGeometry,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    want: (bool, bool, bool),
) -> Conv2dGrads<T> {
    let (want_x, want_w, want_b) = want;
    let plane = g.out_h() * g.out_w();
    let k = g.patch_len();
    let in_len = g.in_channels * g.in_h * g.in_w;
    let out_len = g.out_channels * plane;

    let mut dx = want_x.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = want_w.then(|| vec![T::zero(); g.out_channels * k]);
    let mut db = want_b.then(|| vec![T::zero(); g.out_channels]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }];
    let mut dcols = vec![T::zero(); if want_x { k * plane } else { 0 }];

    for n in 0..g.batch {
        let gn = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gn.chunks(plane).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let cols_ref: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            // dW[Cout, K] += G[Cout, P] * cols^T[P, K]
            T::gemm(
                g.out_channels,
                plane,
                k,
                T::one(),
                gn,
                plane as isize,
                1,
                cols_ref,
                1,
                plane as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            // dcols[K, P] = W^T[K, Cout] * G[Cout, P]
            let target: &mut [T] = if g.is_pointwise() { dxn } else { &mut dcols };
            T::gemm(
                k,
                g.out_channels,
                plane,
                T::one(),
                w,
                1,
                k as isize,
                gn,
                plane as isize,
                1,
                T::zero(),
                target,
                plane as isize,
                1,
            );
            if !g.is_pointwise() {
                col2im(g, &dcols, dxn);
            }
        }
    }
    Conv2dGrads {
        input: dx,
        kernel: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as a reference.
    fn naive(g: &Conv2dGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.in_channels + ci) * g.in_h + iy as usize) * g.in_w
                                        + ix as usize;
                                    let wi = ((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * g.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops() {
        for &(stride, padding) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = Conv2dGeometry::new(&[2, 3, 7, 6], &[4, 3, 3, 3], stride, padding).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..4 * 27).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let b = vec![0.5, -1.0, 0.0, 2.0];
            let got = conv2d_forward(&g, &x, &w, Some(&b));
            assert_eq!(got, naive(&g, &x, &w, &b), "stride {stride} padding {padding}");
        }
    }

    /// `<conv(x), gy> = <x, dx> = <w, dw>` for the bias-free conv, in integers.
    #[test]
    fn backward_is_the_adjoint() {
        let cases = [
            ([2, 3, 7, 6], [4, 3, 3, 3], 1, 1),
            ([1, 2, 5, 5], [1, 2, 7, 7], 1, 3),
            ([1, 2, 8, 9], [3, 2, 3, 3], 2, 1),
            ([1, 3, 9, 8], [2, 3, 5, 5], 2, 2),
            ([2, 4, 4, 4], [3, 4, 1, 1], 1, 0),
            ([1, 1, 6, 7], [1, 1, 3, 3], 3, 0),
        ];
        for (input, kernel, stride, padding) in cases {
            let g = Conv2dGeometry::new(&input, &kernel, stride, padding).unwrap();
            let nx: usize = input.iter().product();
            let nw: usize = kernel.iter().product();
            let x: Vec<f64> = (0..nx).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..nw).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
            let y = naive(&g, &x, &w, &vec![0.0; kernel[0]]);
            let gy: Vec<f64> = (0..y.len()).map(|i| ((i * 5 % 9) as f64) - 4.0).collect();
            let grads = conv2d_backward(&g, &x, &w, &gy, (true, true, true));
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let lhs = dot(&y, &gy);
            assert_eq!(dot(&x, grads.input.as_ref().unwrap()), lhs, "{input:?} {kernel:?}");
            assert_eq!(dot(&w, grads.kernel.as_ref().unwrap()), lhs, "{input:?} {kernel:?}");
            let db = grads.bias.unwrap();
            let plane = g.out_h() * g.out_w();
            for co in 0..kernel[0] {
                let expect: f64 = (0..g.batch)
                    .flat_map(|n| gy[(n * kernel[0] + co) * plane..][..plane].iter())
                    .sum();
                assert_eq!(db[co], expect);
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_even_kernels() {
        assert!(Conv2dGeometry::new(&[1, 3, 5, 5], &[2, 4, 3, 3], 1, 1).is_err());
        assert!(Conv2dGeometry::new(&[1, 3, 5, 5], &[2, 3, 2, 2], 1, 1).is_err());
        assert!(Conv2dGeometry::new(&[1, 3, 2, 2], &[2, 3, 5, 5], 1, 0).is_err());
    }
}
