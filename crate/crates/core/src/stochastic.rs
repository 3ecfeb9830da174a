//! Closed-form probabilistic building blocks: diagonal Gaussians, KL terms,
//! the smoothed free-bits surrogate, per-pixel variance likelihood,
//! probability recentering and the Fréchet distance between Gaussians.
//!
//! Every function here is pure; randomness only enters through explicit
//! noise tensors.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autograd::kl_term;
use crate::error::{contract, Result};
use crate::tensor::{Float, Tensor};

/// Diagonal Gaussian over one latent layer, stored as mean and log-std.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<T> {
    pub mean: Tensor<T>,
    pub log_std: Tensor<T>,
}

impl<T: Float> DiagGaussian<T> {
    pub fn new(mean: Tensor<T>, log_std: Tensor<T>) -> Result<Self> {
        if mean.shape() != log_std.shape() {
            return Err(contract(format!(
                "mean {:?} and log_std {:?} differ in shape",
                mean.shape(),
                log_std.shape()
            )));
        }
        if !log_std.is_finite() {
            return Err(contract("log_std must be finite"));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(shape: &[usize]) -> Self {
        Self { mean: Tensor::zeros(shape), log_std: Tensor::zeros(shape) }
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn std(&self) -> Tensor<T> {
        self.log_std.map(|l| l.exp())
    }
}

/// `KL(q || p)` summed over all elements.
pub fn kl_diag_gaussian<T: Float>(q: &DiagGaussian<T>, p: &DiagGaussian<T>) -> Result<f64> {
    if q.shape() != p.shape() {
        return Err(contract(format!("KL shape mismatch {:?} vs {:?}", q.shape(), p.shape())));
    }
    let total = q
        .mean
        .data()
        .iter()
        .zip(q.log_std.data())
        .zip(p.mean.data().iter().zip(p.log_std.data()))
        .map(|((&mq, &lq), (&mp, &lp))| kl_term(mq, lq, mp, lp).as_f64())
        .sum::<f64>();
    Ok(total.max(0.0))
}

/// Softplus-smoothed free bits: `log(1 + e^(kl - fb)) + fb`.
pub fn smoothed_free_bits(kl: f64, fb: f64) -> f64 {
    let excess = kl - fb;
    if excess > 30.0 {
        kl
    } else {
        excess.exp().ln_1p() + fb
    }
}

/// `mean + temperature * exp(log_std) * noise`.
pub fn reparam_sample<T: Float>(d: &DiagGaussian<T>, noise: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if noise.shape() != d.shape() {
        return Err(contract(format!("noise {:?} vs distribution {:?}", noise.shape(), d.shape())));
    }
    if temperature <= 0.0 {
        return Err(contract("temperature must be positive"));
    }
    let t = T::of(temperature);
    let data = d
        .mean
        .data()
        .iter()
        .zip(d.log_std.data())
        .zip(noise.data())
        .map(|((&m, &l), &e)| m + t * l.exp() * e)
        .collect();
    Tensor::from_vec(d.shape(), data)
}

/// Running per-pixel variance of the reconstruction error.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelVarianceTracker<T> {
    pub variance: Tensor<T>,
    pub momentum: f64,
    pub floor: f64,
}

impl<T: Float> PixelVarianceTracker<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_FLOOR: f64 = 1e-4;

    /// Tracker over one image shape, initialized to unit variance.
    pub fn new(image_shape: &[usize]) -> Self {
        Self::with_params(image_shape, 1.0, Self::DEFAULT_MOMENTUM, Self::DEFAULT_FLOOR)
    }

    pub fn with_params(image_shape: &[usize], init: f64, momentum: f64, floor: f64) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
        assert!(floor > 0.0, "floor must be positive");
        Self { variance: Tensor::full(image_shape, T::of(init.max(floor))), momentum, floor }
    }

    /// Changes the floor and lifts any variance already below it.
    pub fn set_floor(&mut self, floor: f64) {
        assert!(floor > 0.0, "floor must be positive");
        self.floor = floor;
        self.variance = self.variance.map(|v| if v.as_f64() < floor { T::of(floor) } else { v });
    }

    /// EMA update from a batch of squared errors shaped `(N, image...)`.
    pub fn update(&mut self, batch_sq_errors: &Tensor<T>) -> Result<()> {
        let per = self.variance.numel();
        let shape = batch_sq_errors.shape();
        if shape.is_empty() || shape[0] == 0 || shape[1..] != *self.variance.shape() {
            return Err(contract(format!(
                "squared errors {:?} do not match tracker {:?}",
                shape,
                self.variance.shape()
            )));
        }
        let n = shape[0];
        let inv_n = 1.0 / n as f64;
        let (m, floor) = (self.momentum, self.floor);
        let errs = batch_sq_errors.data();
        for (i, v) in self.variance.data_mut().iter_mut().enumerate() {
            let batch_mean = (0..n).map(|b| errs[b * per + i].as_f64()).sum::<f64>() * inv_n;
            *v = T::of((m * v.as_f64() + (1.0 - m) * batch_mean).max(floor));
        }
        Ok(())
    }
}

/// Free-function form of [`PixelVarianceTracker::update`].
pub fn update_pixel_variance<T: Float>(tracker: &mut PixelVarianceTracker<T>, batch_sq_errors: &Tensor<T>) -> Result<()> {
    tracker.update(batch_sq_errors)
}

/// Gaussian negative log-likelihood of one image (or a batch, summed) under
/// the tracked per-pixel variance, including the `½ log 2π` constant.
pub fn gaussian_nll<T: Float>(x: &Tensor<T>, recon: &Tensor<T>, tracker: &PixelVarianceTracker<T>) -> Result<f64> {
    if x.shape() != recon.shape() {
        return Err(contract(format!("image {:?} vs reconstruction {:?}", x.shape(), recon.shape())));
    }
    let per = tracker.variance.numel();
    if x.numel() % per != 0 {
        return Err(contract("image size is not a multiple of the tracked shape"));
    }
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let var = tracker.variance.data();
    Ok(x
        .data()
        .iter()
        .zip(recon.data())
        .enumerate()
        .map(|(i, (&a, &b))| {
            let v = var[i % per].as_f64();
            let d = a.as_f64() - b.as_f64();
            d * d / (2.0 * v) + 0.5 * v.ln() + half_log_2pi
        })
        .sum())
}

/// `f(p) = ½(√p − √(1−p) + 1)` applied `times` times.
pub fn recenter_probability(p: f64, times: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(contract(format!("probability {p} outside [0, 1]")));
    }
    let mut v = p;
    for _ in 0..times {
        v = (0.5 * (v.sqrt() - (1.0 - v).sqrt() + 1.0)).clamp(0.0, 1.0);
    }
    Ok(v)
}

/// Gaussian summary of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub const SHRINKAGE: f64 = 1e-6;

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance. When there are no more samples
    /// than dimensions the covariance is rank deficient; a small ridge is
    /// added and a warning logged.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(contract("feature statistics need at least two samples"));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(contract("feature vectors differ in length"));
        }
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; dim * dim];
        for f in features {
            for i in 0..dim {
                let di = f[i] - mean[i];
                for j in i..dim {
                    cov[i * dim + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / (n - 1) as f64;
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        if n < dim + 1 {
            warn!("{n} samples for {dim} feature dimensions: covariance is rank deficient, adding {} I", Self::SHRINKAGE);
            for i in 0..dim {
                cov[i * dim + i] += Self::SHRINKAGE;
            }
        }
        Ok(Self { mean, covariance: cov, count: n })
    }
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if d != b.dim() || a.covariance.len() != d * d || b.covariance.len() != d * d {
        return Err(contract(format!("feature dimensions differ: {} vs {}", d, b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let s1 = DMatrix::from_row_slice(d, d, &a.covariance);
    let s2 = DMatrix::from_row_slice(d, d, &b.covariance);
    let s1_half = sqrt_psd(s1.clone());
    let mut inner = &s1_half * &s2 * &s1_half;
    // Symmetrize away round-off before the eigendecomposition.
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}
