//! Negative ELBO with smoothed free bits, Adam, the training loop and the
//! held-out metrics.

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::data::ImageSet;
use crate::error::{contract, Error, Result};
use crate::kv::KvMap;
use crate::model::{ConditionVector, DecodeOptions, ForwardTrace, GraphTrace, SeededNoise, VaexSnapshot, ZeroNoise};
use crate::nn::{Mode, ParamId, ParamStore, Session};
use crate::probcache::ProbCache;
use crate::stochastic::{gaussian_nll, smoothed_free_bits, PixelVarianceTracker};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate factor applied after every epoch.
    pub decay: f64,
    pub free_bits: f64,
    pub epochs: usize,
    pub seed: u64,
    pub pixel_var_momentum: f64,
    /// Lower bound of the tracked per-pixel variance. It caps the weight of
    /// the pixel term against the KL; near 1e-4 the priors stop carrying the
    /// class and counterfactuals at low r lose it.
    pub pixel_var_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, learning_rate: 1e-3, decay: 0.97, free_bits: 2.0, epochs: 40, seed: 0, pixel_var_momentum: 0.9, pixel_var_floor: 1e-2 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(contract("batch_size must be at least 2 for batch normalization"));
        }
        if !(self.free_bits >= 0.0) {
            return Err(contract("free_bits must be nonnegative"));
        }
        if !(self.learning_rate > 0.0) || !(self.decay > 0.0) {
            return Err(contract("learning_rate and decay must be positive"));
        }
        if !(0.0..1.0).contains(&self.pixel_var_momentum) {
            return Err(contract("pixel_var_momentum must lie in [0, 1)"));
        }
        if !(self.pixel_var_floor > 0.0 && self.pixel_var_floor.is_finite()) {
            return Err(contract("pixel_var_floor must be positive"));
        }
        Ok(())
    }

    /// Learning rate during epoch `e` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("batch_size", self.batch_size);
        m.set("learning_rate", self.learning_rate);
        m.set("decay", self.decay);
        m.set("free_bits", self.free_bits);
        m.set("epochs", self.epochs);
        m.set("seed", self.seed);
        m.set("pixel_var_momentum", self.pixel_var_momentum);
        m.set("pixel_var_floor", self.pixel_var_floor);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            batch_size: m.parse_or("batch_size", d.batch_size)?,
            learning_rate: m.parse_or("learning_rate", d.learning_rate)?,
            decay: m.parse_or("decay", d.decay)?,
            free_bits: m.parse_or("free_bits", d.free_bits)?,
            epochs: m.parse_or("epochs", d.epochs)?,
            seed: m.parse_or("seed", d.seed)?,
            pixel_var_momentum: m.parse_or("pixel_var_momentum", d.pixel_var_momentum)?,
            pixel_var_floor: m.parse_or("pixel_var_floor", d.pixel_var_floor)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Batch-averaged loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl_per_layer: Vec<f64>,
    pub kl_total_raw: f64,
    pub kl_total_freebitted: f64,
    pub total: f64,
}

/// Builds the objective on a graph trace. Free bits act on each layer's
/// batch-mean KL.
pub fn elbo_loss<T: Float>(
    s: &mut Session<'_, T>,
    trace: &GraphTrace,
    x: &Tensor<T>,
    tracker: &PixelVarianceTracker<T>,
    free_bits: f64,
) -> Result<(Var, LossBreakdown)> {
    if s.graph.shape(trace.reconstruction) != x.shape() {
        return Err(contract(format!("reconstruction {:?} vs images {:?}", s.graph.shape(trace.reconstruction), x.shape())));
    }
    let nll_per = s.graph.gaussian_nll(trace.reconstruction, x.clone(), &tracker.variance);
    let nll = s.graph.mean_all(nll_per);
    let mut total = nll;
    let mut kl_per_layer = Vec::with_capacity(trace.layers.len());
    let mut kl_fb = 0.0;
    for l in &trace.layers {
        let kl = s.graph.mean_all(l.kl);
        kl_per_layer.push(s.value(kl).data()[0].as_f64());
        let excess = s.graph.add_scalar(kl, -free_bits);
        let soft = s.graph.softplus(excess);
        let term = s.graph.add_scalar(soft, free_bits);
        kl_fb += s.value(term).data()[0].as_f64();
        total = s.graph.add(total, term);
    }
    let breakdown = LossBreakdown {
        nll: s.value(nll).data()[0].as_f64(),
        kl_total_raw: kl_per_layer.iter().sum(),
        kl_per_layer,
        kl_total_freebitted: kl_fb,
        total: s.value(total).data()[0].as_f64(),
    };
    Ok((total, breakdown))
}

/// The same terms computed from a materialized trace.
pub fn loss_breakdown<T: Float>(
    trace: &ForwardTrace<T>,
    x: &Tensor<T>,
    tracker: &PixelVarianceTracker<T>,
    free_bits: f64,
) -> Result<LossBreakdown> {
    let n = x.shape()[0];
    if trace.reconstruction.shape() != x.shape() {
        return Err(contract("reconstruction and images differ in shape"));
    }
    let nll = gaussian_nll(x, &trace.reconstruction, tracker)? / n as f64;
    let kl_per_layer: Vec<f64> = trace.layers.iter().map(|l| l.kl.iter().sum::<f64>() / n as f64).collect();
    let kl_total_freebitted = kl_per_layer.iter().map(|&k| smoothed_free_bits(k, free_bits)).sum();
    Ok(LossBreakdown {
        nll,
        kl_total_raw: kl_per_layer.iter().sum(),
        kl_per_layer,
        kl_total_freebitted,
        total: nll + kl_total_freebitted,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        self.t += 1;
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (id, g) in grads {
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(*id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Recentered conditions for a batch, failing on the first uncached id.
pub fn conditions_for(cache: &ProbCache, ids: &[&str]) -> Result<Vec<ConditionVector>> {
    ids.iter()
        .map(|id| {
            cache.get(id).map(|e| e.condition()).ok_or_else(|| Error::MissingCacheEntry(id.to_string()))?
        })
        .collect()
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const METRIC_LOG_HEADER: &str = "step\tepoch\tnll\tkl_raw\tkl_fb\ttotal\tlr";

impl StepRecord {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}",
            self.step, self.epoch, self.loss.nll, self.loss.kl_total_raw, self.loss.kl_total_freebitted, self.loss.total, self.lr
        )
    }
}

/// Receives progress from [`train`].
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _snapshot: &VaexSnapshot<f32>) -> Result<()> {
        Ok(())
    }
}

/// Writes the metric log to any sink.
pub struct TsvLogger<W: Write> {
    out: W,
}

impl<W: Write> TsvLogger<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRIC_LOG_HEADER}")?;
        Ok(Self { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TrainObserver for TsvLogger<W> {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", r.tsv_row())?;
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _snapshot: &VaexSnapshot<f32>) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl TrainObserver for () {}

/// Noise seed of a training step.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// One optimization step on a batch; returns the loss before the update.
pub fn train_step(
    snap: &mut VaexSnapshot<f32>,
    adam: &mut Adam<f32>,
    x: &Tensor<f32>,
    cond: &[ConditionVector],
    free_bits: f64,
    noise_seed: u64,
) -> Result<LossBreakdown> {
    let n = x.shape()[0];
    let mut s = Session::new(&snap.params, Mode::Train);
    let xv = s.constant(x.clone());
    let mut noise = SeededNoise::batch(noise_seed, n);
    let trace = snap.model.forward(&mut s, Some(xv), cond, DecodeOptions::training(), &mut noise)?;
    let (loss, breakdown) = elbo_loss(&mut s, &trace, x, &snap.pixel_variance, free_bits)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {breakdown:?}")));
    }
    let mut grads = s.graph.backward(loss);
    let pg = s.param_grads(&mut grads);
    let updates = s.take_bn_updates();
    drop(s);
    adam.step(&mut snap.params, &pg);
    snap.params.apply_bn_updates(&updates);

    // per-pixel variance from the updated model's reconstruction of this batch
    let recon = snap.model.reconstruct(&snap.params, x, cond, DecodeOptions::training(), &mut ZeroNoise)?;
    let sq = x.zip_map(&recon, |a, b| (a - b) * (a - b));
    snap.pixel_variance.update(&sq)?;
    Ok(breakdown)
}

/// Trains in place for `cfg.epochs` epochs over `data`.
pub fn train(
    snap: &mut VaexSnapshot<f32>,
    data: &ImageSet,
    cache: &ProbCache,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.len() < cfg.batch_size.min(2) || data.len() < 2 {
        return Err(contract("training needs at least two samples"));
    }
    if data.image_shape() != snap.config().image_shape() {
        return Err(contract("dataset images do not match the model configuration"));
    }
    let all_ids: Vec<&str> = data.ids.iter().map(String::as_str).collect();
    let conds = conditions_for(cache, &all_ids)?;
    snap.pixel_variance.momentum = cfg.pixel_var_momentum;
    snap.pixel_variance.set_floor(cfg.pixel_var_floor);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut records = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let x = data.gather(batch);
            let c: Vec<ConditionVector> = batch.iter().map(|&i| conds[i].clone()).collect();
            let loss = train_step(snap, &mut adam, &x, &c, cfg.free_bits, step_seed(cfg.seed, step))?;
            let rec = StepRecord { step, epoch, loss, lr: adam.lr };
            observer.on_step(&rec)?;
            records.push(rec);
            step += 1;
        }
        snap.meta.set("epoch", epoch + 1);
        snap.meta.set("step", step);
        snap.meta.set("train_seed", cfg.seed);
        if let Some(last) = records.last() {
            info!("epoch {} step {step}: total {:.2} nll {:.2} kl {:.2}", epoch + 1, last.loss.total, last.loss.nll, last.loss.kl_total_raw);
        }
        observer.on_epoch_end(epoch, snap)?;
    }
    Ok(records)
}

/// Held-out metrics; per-sample sums averaged over the set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub nll: f64,
    pub kl: f64,
    /// Per-element squared error of the deterministic reconstruction.
    pub mse: f64,
    pub bits_per_dim: f64,
    pub n: usize,
}

/// Deterministic (`r = 1`, zero noise) evaluation in inference mode.
pub fn evaluate<T: Float>(snap: &VaexSnapshot<T>, data: &ImageSet, cache: &ProbCache, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(contract("empty evaluation set"));
    }
    let d = snap.config().pixel_dims();
    let (mut nll, mut kl, mut se) = (0.0, 0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for batch in indices.chunks(batch_size.max(1)) {
        let ids: Vec<&str> = batch.iter().map(|&i| data.ids[i].as_str()).collect();
        let cond = conditions_for(cache, &ids)?;
        let x: Tensor<T> = data.gather(batch).cast();
        let tr = snap.model.trace(&snap.params, Some(&x), &cond, DecodeOptions::training(), &mut ZeroNoise)?;
        nll += gaussian_nll(&x, &tr.reconstruction, &snap.pixel_variance)?;
        kl += tr.total_kl().iter().sum::<f64>();
        se += x.data().iter().zip(tr.reconstruction.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>();
    }
    let n = data.len() as f64;
    let (nll, kl) = (nll / n, kl / n);
    Ok(EvalMetrics {
        nll,
        kl,
        mse: se / (n * d as f64),
        bits_per_dim: (nll + kl) / (d as f64 * std::f64::consts::LN_2),
        n: data.len(),
    })
}
