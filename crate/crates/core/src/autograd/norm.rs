//! Batch and instance normalization kernels over `(N, C, plane)` buffers.

use crate::tensor::Float;

pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel statistics over batch and spatial positions.
pub(crate) fn batch_stats<T: Float>(x: &[T], n: usize, c: usize, plane: usize, eps: f64) -> BatchStats<T> {
    let m = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            acc = acc + x[off..off + plane].iter().copied().sum::<T>();
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            sq = sq + x[off..off + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    let inv_std = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
    BatchStats { mean, var, inv_std }
}

pub(crate) fn normalize<T: Float>(x: &[T], n: usize, c: usize, plane: usize, mean: &[T], inv_std: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (mu, is) = (mean[ch], inv_std[ch]);
            for (o, &v) in out[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = (v - mu) * is;
            }
        }
    }
    out
}

/// Gradient of training-mode batch normalization given the normalized output.
pub(crate) fn batch_norm_backward<T: Float>(
    grad: &[T],
    xhat: &[T],
    n: usize,
    c: usize,
    plane: usize,
    inv_std: &[T],
) -> Vec<T> {
    let m = T::of((n * plane) as f64);
    let mut gx = vec![T::zero(); grad.len()];
    for ch in 0..c {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sg = sg + grad[i];
                sgx = sgx + grad[i] * xhat[i];
            }
        }
        let scale = inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                gx[i] = scale * (m * grad[i] - sg - xhat[i] * sgx);
            }
        }
    }
    gx
}

pub(crate) struct InstanceStats<T> {
    pub mean: Vec<T>,
    /// Spatial standard deviation without epsilon.
    pub std: Vec<T>,
    /// `std + eps`, the divisor actually applied.
    pub sigma: Vec<T>,
}

pub(crate) fn instance_stats<T: Float>(x: &[T], planes: usize, plane: usize, eps: f64) -> InstanceStats<T> {
    let inv = T::one() / T::of(plane as f64);
    let mut mean = Vec::with_capacity(planes);
    let mut std = Vec::with_capacity(planes);
    for p in x.chunks(plane).take(planes) {
        let mu = p.iter().copied().sum::<T>() * inv;
        let var = p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
        mean.push(mu);
        std.push(var.sqrt());
    }
    let sigma = std.iter().map(|&s| s + T::of(eps)).collect();
    InstanceStats { mean, std, sigma }
}

pub(crate) fn instance_norm_backward<T: Float>(
    grad: &[T],
    x: &[T],
    plane: usize,
    stats: &InstanceStats<T>,
) -> Vec<T> {
    let mut gx = vec![T::zero(); grad.len()];
    let nf = T::of(plane as f64);
    for (p, ((g, xs), out)) in grad.chunks(plane).zip(x.chunks(plane)).zip(gx.chunks_mut(plane)).enumerate() {
        let (mu, s, sigma) = (stats.mean[p], stats.std[p], stats.sigma[p]);
        let mean_g = g.iter().copied().sum::<T>() / nf;
        let dot: T = g.iter().zip(xs).map(|(&gi, &xi)| gi * (xi - mu)).sum();
        // A constant plane has zero centered values, so the std term vanishes.
        let coef = if s > T::zero() { dot / (nf * s * sigma * sigma) } else { T::zero() };
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xs) {
            *o = (gi - mean_g) / sigma - (xi - mu) * coef;
        }
    }
    gx
}
