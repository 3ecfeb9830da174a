//! im2col / col2im convolution kernels over NCHW buffers.
//!
//! Column buffers are laid out per sample as `(channels * k * k, out_h * out_w)`
//! so each sample is a single GEMM against the `(c_out, c_in * k * k)` weight.

use crate::tensor::{gemm, Float, MatRef};

/// Geometry of a square-kernel convolution over one `(c, h, w)` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// For output index `o` along an axis, the input index hit by kernel tap
    /// `t`, or `None` if it falls into padding.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

pub(crate) fn im2col<T: Float>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let dst = &mut cols[row..row + p];
                for oh in 0..g.out_h {
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    match g.src(oh, ki, g.h) {
                        None => out_row.fill(T::zero()),
                        Some(ih) => {
                            let src_row = &plane[ih * g.w..(ih + 1) * g.w];
                            for (ow, d) in out_row.iter_mut().enumerate() {
                                *d = match g.src(ow, kj, g.w) {
                                    Some(iw) => src_row[iw],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                let src = &cols[row..row + p];
                for oh in 0..g.out_h {
                    let Some(ih) = g.src(oh, ki, g.h) else { continue };
                    let in_row = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    let dst_row = &mut plane[ih * g.w..(ih + 1) * g.w];
                    for (ow, &v) in in_row.iter().enumerate() {
                        if let Some(iw) = g.src(ow, kj, g.w) {
                            dst_row[iw] = dst_row[iw] + v;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

/// `out[n] = weight (c_out x c_in k k) * im2col(x[n])`.
pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    c_out: usize,
) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); batch * c_out * p];
    let mut cols = vec![T::zero(); if is_pointwise(g) { 0 } else { rows * p }];
    let wm = MatRef::new(weight, c_out, rows);
    for n in 0..batch {
        let img = &x[n * g.image_len()..(n + 1) * g.image_len()];
        let colref = if is_pointwise(g) {
            MatRef::new(img, rows, p)
        } else {
            im2col(img, g, &mut cols);
            MatRef::new(&cols, rows, p)
        };
        gemm(wm, colref, T::zero(), &mut out[n * c_out * p..(n + 1) * c_out * p]);
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    c_out: usize,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut gx = need_input.then(|| vec![T::zero(); batch * g.image_len()]);
    let mut gw = need_weight.then(|| vec![T::zero(); c_out * rows]);
    let mut cols = vec![T::zero(); rows * p];
    let wm = MatRef::new(weight, c_out, rows);
    for n in 0..batch {
        let go = MatRef::new(&grad_out[n * c_out * p..(n + 1) * c_out * p], c_out, p);
        let img = &x[n * g.image_len()..(n + 1) * g.image_len()];
        if let Some(gw) = gw.as_mut() {
            let colref = if is_pointwise(g) {
                MatRef::new(img, rows, p)
            } else {
                im2col(img, g, &mut cols);
                MatRef::new(&cols, rows, p)
            };
            gemm(go, colref.t(), T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[n * g.image_len()..(n + 1) * g.image_len()];
            if is_pointwise(g) {
                gemm(wm.t(), go, T::zero(), dst);
            } else {
                gemm(wm.t(), go, T::zero(), &mut cols);
                col2im(&cols, g, dst);
            }
        }
    }
    (gx, gw)
}

/// Transposed convolution: `g` describes the *output* image, whose
/// convolution geometry maps back onto the input spatial size.
/// Weight layout is `(c_in, c_out, k, k)` with `c_out = g.c`.
pub(crate) fn conv_transpose2d_forward<T: Float>(
    x: &[T],
    batch: usize,
    c_in: usize,
    g: &ConvGeom,
    weight: &[T],
) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); batch * g.image_len()];
    let mut cols = vec![T::zero(); rows * p];
    let wm = MatRef::new(weight, c_in, rows);
    for n in 0..batch {
        let xn = MatRef::new(&x[n * c_in * p..(n + 1) * c_in * p], c_in, p);
        gemm(wm.t(), xn, T::zero(), &mut cols);
        col2im(&cols, g, &mut out[n * g.image_len()..(n + 1) * g.image_len()]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Float>(
    x: &[T],
    batch: usize,
    c_in: usize,
    g: &ConvGeom,
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut gx = need_input.then(|| vec![T::zero(); batch * c_in * p]);
    let mut gw = need_weight.then(|| vec![T::zero(); c_in * rows]);
    let mut cols = vec![T::zero(); rows * p];
    let wm = MatRef::new(weight, c_in, rows);
    for n in 0..batch {
        im2col(&grad_out[n * g.image_len()..(n + 1) * g.image_len()], g, &mut cols);
        let cm = MatRef::new(&cols, rows, p);
        if let Some(gx) = gx.as_mut() {
            gemm(wm, cm, T::zero(), &mut gx[n * c_in * p..(n + 1) * c_in * p]);
        }
        if let Some(gw) = gw.as_mut() {
            let xn = MatRef::new(&x[n * c_in * p..(n + 1) * c_in * p], c_in, p);
            gemm(xn, cm.t(), T::one(), gw);
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], c_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; c_out * g.out_h * g.out_w];
        for co in 0..c_out {
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = 0.0;
                    for ci in 0..g.c {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + ih as usize) * g.w + iw as usize]
                                    * w[((co * g.c + ci) * g.k + ki) * g.k + kj];
                            }
                        }
                    }
                    out[(co * g.out_h + oh) * g.out_w + ow] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let g = ConvGeom::new(3, 6, 6, k, stride, pad);
            let x = seq(2 * g.image_len(), 0.1);
            let w = seq(4 * g.col_rows(), 0.05);
            let out = conv2d_forward(&x, 2, &g, &w, 4);
            for n in 0..2 {
                let expect = naive_conv(&x[n * g.image_len()..(n + 1) * g.image_len()], &g, &w, 4);
                let got = &out[n * expect.len()..(n + 1) * expect.len()];
                for (a, b) in got.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-12, "k={k} s={stride}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 5, 3, 2, 1);
        let x = seq(g.image_len(), 0.3);
        let y = seq(g.col_rows() * g.col_cols(), 0.7);
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> when weights are shared.
        let g = ConvGeom::new(3, 8, 8, 4, 2, 1);
        assert_eq!((g.out_h, g.out_w), (4, 4));
        let c_small = 2;
        let x = seq(g.image_len(), 0.2);
        let w = seq(c_small * g.col_rows(), 0.1);
        let y = seq(c_small * g.col_cols(), 0.4);
        let conv = conv2d_forward(&x, 1, &g, &w, c_small);
        let lhs: f64 = conv.iter().zip(&y).map(|(a, b)| a * b).sum();
        let convt = conv_transpose2d_forward(&y, 1, c_small, &g, &w);
        let rhs: f64 = convt.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
