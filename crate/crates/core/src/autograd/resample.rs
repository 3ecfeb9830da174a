//! Separable bilinear resampling (half-pixel centers, edge clamped).

use crate::tensor::Float;

#[derive(Clone, Debug)]
pub(crate) struct AxisWeights {
    pub idx0: Vec<usize>,
    pub idx1: Vec<usize>,
    pub w1: Vec<f64>,
}

impl AxisWeights {
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut idx0 = Vec::with_capacity(out_len);
        let mut idx1 = Vec::with_capacity(out_len);
        let mut w1 = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            idx0.push(i0);
            idx1.push(i1);
            w1.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { idx0, idx1, w1 }
    }

    pub fn out_len(&self) -> usize {
        self.idx0.len()
    }
}

pub(crate) fn resample_forward<T: Float>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    ah: &AxisWeights,
    aw: &AxisWeights,
) -> Vec<T> {
    let (oh, ow) = (ah.out_len(), aw.out_len());
    let mut out = vec![T::zero(); planes * oh * ow];
    let wh: Vec<(T, T)> = ah.w1.iter().map(|&l| (T::of(1.0 - l), T::of(l))).collect();
    let ww: Vec<(T, T)> = aw.w1.iter().map(|&l| (T::of(1.0 - l), T::of(l))).collect();
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let r0 = &src[ah.idx0[i] * w..(ah.idx0[i] + 1) * w];
            let r1 = &src[ah.idx1[i] * w..(ah.idx1[i] + 1) * w];
            let (a0, a1) = wh[i];
            for j in 0..ow {
                let (b0, b1) = ww[j];
                let (j0, j1) = (aw.idx0[j], aw.idx1[j]);
                dst[i * ow + j] = a0 * (b0 * r0[j0] + b1 * r0[j1]) + a1 * (b0 * r1[j0] + b1 * r1[j1]);
            }
        }
    }
    out
}

pub(crate) fn resample_backward<T: Float>(
    grad_out: &[T],
    planes: usize,
    (h, w): (usize, usize),
    ah: &AxisWeights,
    aw: &AxisWeights,
) -> Vec<T> {
    let (oh, ow) = (ah.out_len(), aw.out_len());
    let mut gx = vec![T::zero(); planes * h * w];
    let wh: Vec<(T, T)> = ah.w1.iter().map(|&l| (T::of(1.0 - l), T::of(l))).collect();
    let ww: Vec<(T, T)> = aw.w1.iter().map(|&l| (T::of(1.0 - l), T::of(l))).collect();
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (a0, a1) = wh[i];
            let (r0, r1) = (ah.idx0[i] * w, ah.idx1[i] * w);
            for j in 0..ow {
                let g = go[i * ow + j];
                let (b0, b1) = ww[j];
                let (j0, j1) = (aw.idx0[j], aw.idx1[j]);
                dst[r0 + j0] = dst[r0 + j0] + a0 * b0 * g;
                dst[r0 + j1] = dst[r0 + j1] + a0 * b1 * g;
                dst[r1 + j0] = dst[r1 + j0] + a1 * b0 * g;
                dst[r1 + j1] = dst[r1 + j1] + a1 * b1 * g;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_is_two_by_two_average() {
        let a = AxisWeights::bilinear(4, 2);
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = resample_forward(&x, 1, (4, 4), &a, &a);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn doubling_preserves_constants() {
        let a = AxisWeights::bilinear(3, 6);
        let y = resample_forward(&[0.7f64; 9], 1, (3, 3), &a, &a);
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn backward_is_adjoint() {
        let ah = AxisWeights::bilinear(3, 6);
        let aw = AxisWeights::bilinear(5, 10);
        let x: Vec<f64> = (0..15).map(|v| (v as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..60).map(|v| (v as f64 * 0.11).cos()).collect();
        let y = resample_forward(&x, 1, (3, 5), &ah, &aw);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let gx = resample_backward(&g, 1, (3, 5), &ah, &aw);
        let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
