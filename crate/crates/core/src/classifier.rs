//! The investigated classifier: four conv blocks, global pooling, a linear
//! head. Its pooled features double as the embedding for Fréchet distances.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_rows, Var};
use crate::checkpoint::Checkpoint;
use crate::data::ImageSet;
use crate::error::{contract, Error, Result};
use crate::kv::{join_list, KvMap};
use crate::model::ConditionVector;
use crate::nn::{seeded_rng, BatchNorm2d, Conv2d, Linear, Mode, ParamBuilder, ParamStore, Session};
use crate::probcache::{ProbCache, ProbCacheEntry};
use crate::tensor::{Float, Tensor};
use crate::train::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub class_count: usize,
    /// Output channels of the four conv blocks; the last is the feature size.
    pub widths: Vec<usize>,
    pub bn_momentum: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { image_size: 32, image_channels: 3, class_count: 2, widths: vec![16, 32, 64, 64], bn_momentum: 0.9 }
    }
}

impl ClassifierConfig {
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 || self.widths.contains(&0) {
            return Err(contract("the classifier has four conv blocks with positive widths"));
        }
        if self.class_count < 2 || self.image_channels == 0 {
            return Err(contract("class_count >= 2 and image_channels >= 1 required"));
        }
        if self.image_size < 8 {
            return Err(contract("image_size must be at least 8"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("image_size", self.image_size);
        m.set("image_channels", self.image_channels);
        m.set("class_count", self.class_count);
        m.set("widths", join_list(&self.widths));
        m.set("bn_momentum", self.bn_momentum);
        m
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            image_size: m.parse_or("image_size", d.image_size)?,
            image_channels: m.parse_or("image_channels", d.image_channels)?,
            class_count: m.parse_or("class_count", d.class_count)?,
            widths: m.parse_list("widths")?.unwrap_or(d.widths),
            bn_momentum: m.parse_or("bn_momentum", d.bn_momentum)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    cfg: ClassifierConfig,
    blocks: Vec<(Conv2d, BatchNorm2d)>,
    head: Linear,
}

impl Classifier {
    pub fn build<T: Float>(cfg: ClassifierConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let mut pb = ParamBuilder::new(store, &mut rng);
        let mut c_in = cfg.image_channels;
        let mut blocks = Vec::with_capacity(4);
        for (i, &w) in cfg.widths.iter().enumerate() {
            let mut bp = pb.pp(&format!("block{i}"));
            let stride = if i == 0 { 1 } else { 2 };
            let conv = Conv2d::new(&mut bp.pp("conv"), c_in, w, 3, stride, 1, false, 1.0);
            let bn = BatchNorm2d::new(&mut bp.pp("bn"), w, cfg.bn_momentum);
            blocks.push((conv, bn));
            c_in = w;
        }
        let head = Linear::new(&mut pb.pp("head"), c_in, cfg.class_count, 1.0);
        Ok(Self { cfg, blocks, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    /// Pooled features `(N, feature_dim)` and logits `(N, C)`.
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = s.graph.shape(x);
        let expect = [self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size];
        if shape.len() != 4 || shape[1..] != expect {
            return Err(contract(format!("classifier input {shape:?} does not match {expect:?}")));
        }
        let mut f = x;
        for (conv, bn) in &self.blocks {
            f = conv.forward(s, f);
            f = bn.forward(s, f);
            f = s.graph.hard_swish(f);
        }
        let features = s.graph.mean_hw(f);
        let logits = self.head.forward(s, features);
        Ok((features, logits))
    }
}

/// Trained parameters plus provenance.
#[derive(Clone, Debug)]
pub struct ClassifierSnapshot {
    pub net: Classifier,
    pub params: ParamStore<f32>,
    pub meta: KvMap,
}

const KIND: &str = "classifier";

impl ClassifierSnapshot {
    pub fn init(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Classifier::build(cfg, &mut params, seed)?;
        let mut meta = KvMap::new();
        meta.set("init_seed", seed);
        Ok(Self { net, params, meta })
    }

    pub fn config(&self) -> &ClassifierConfig {
        self.net.config()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = KvMap::new();
        header.set("kind", KIND);
        for (k, v) in self.config().to_kv().iter() {
            header.set(&format!("classifier.{k}"), v);
        }
        for (k, v) in self.meta.iter() {
            header.set(&format!("meta.{k}"), v);
        }
        let mut ck = Checkpoint::new(header);
        ck.tensors = self.params.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.get("kind") != Some(KIND) {
            return Err(Error::Format("checkpoint does not hold a classifier".into()));
        }
        let (mut cfg_kv, mut meta) = (KvMap::new(), KvMap::new());
        for (k, v) in ck.header.iter() {
            if let Some(rest) = k.strip_prefix("classifier.") {
                cfg_kv.set(rest, v);
            } else if let Some(rest) = k.strip_prefix("meta.") {
                meta.set(rest, v);
            }
        }
        let mut snap = Self::init(ClassifierConfig::from_kv(&cfg_kv)?, 0)?;
        snap.params.load_named(ck.tensors.clone())?;
        snap.meta = meta;
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Validation accuracy recorded at training time, if any.
    pub fn accuracy(&self) -> Option<f64> {
        self.meta.parse_opt("val_accuracy").ok().flatten()
    }

    fn eval_batch(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut s = Session::new(&self.params, Mode::Eval);
        let xv = s.constant(x.clone());
        let (f, l) = self.net.forward(&mut s, xv)?;
        Ok((s.value(f).clone(), s.value(l).clone()))
    }

    /// Softmax probabilities per image, computed in double precision.
    pub fn predict_probs(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let (_, logits) = self.eval_batch(x)?;
        let c = self.config().class_count;
        let p = softmax_rows(&logits.to_f64_vec(), c);
        Ok(p.chunks(c).map(|r| r.to_vec()).collect())
    }

    /// Raw-probability condition vectors.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<ConditionVector>> {
        self.predict_probs(x)?.into_iter().map(ConditionVector::from_raw).collect()
    }

    pub fn penultimate_features(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let (f, _) = self.eval_batch(x)?;
        let d = self.config().feature_dim();
        Ok(f.to_f64_vec().chunks(d).map(|r| r.to_vec()).collect())
    }

    /// Batched prediction over a whole set.
    pub fn predict_set(&self, set: &ImageSet, batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut out = Vec::with_capacity(set.len());
        for b in idx.chunks(batch_size.max(1)) {
            out.extend(self.predict_probs(&set.gather(b))?);
        }
        Ok(out)
    }

    pub fn features_of(&self, images: &Tensor<f32>, batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let per = images.numel() / n.max(1);
        let mut shape = images.shape().to_vec();
        for start in (0..n).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(n);
            shape[0] = end - start;
            let chunk = Tensor::from_vec(&shape, images.data()[start * per..end * per].to_vec())?;
            out.extend(self.penultimate_features(&chunk)?);
        }
        Ok(out)
    }

    pub fn accuracy_on(&self, set: &ImageSet, batch_size: usize) -> Result<f64> {
        if set.is_empty() {
            return Err(contract("empty evaluation set"));
        }
        let probs = self.predict_set(set, batch_size)?;
        let correct = probs.iter().zip(&set.labels).filter(|(p, &l)| crate::model::argmax(p) == l).count();
        Ok(correct as f64 / set.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 6, batch_size: 64, learning_rate: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub val_accuracy: f64,
    /// Mean training cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    pub degenerate: bool,
}

pub fn train_classifier(
    train: &ImageSet,
    val: &ImageSet,
    model_cfg: ClassifierConfig,
    cfg: &ClassifierTrainConfig,
) -> Result<(ClassifierSnapshot, ClassifierReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(contract("classifier training needs nonempty train and validation sets"));
    }
    if cfg.batch_size < 2 {
        return Err(contract("batch_size must be at least 2"));
    }
    if let Some(&l) = train.labels.iter().find(|&&l| l >= model_cfg.class_count) {
        return Err(contract(format!("label {l} out of range")));
    }
    let degenerate = train.labels.iter().all(|&l| l == train.labels[0]);
    if degenerate {
        warn!("training labels contain a single class; the classifier is trivial");
    }
    let mut snap = ClassifierSnapshot::init(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // step down for the final third
        adam.lr = if epoch * 3 >= cfg.epochs * 2 { cfg.learning_rate * 0.3 } else { cfg.learning_rate };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let x = train.gather(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let mut s = Session::new(&snap.params, Mode::Train);
            let xv = s.constant(x);
            let (_, logits) = snap.net.forward(&mut s, xv)?;
            let loss = s.graph.cross_entropy(logits, &labels);
            total += s.value(loss).data()[0] as f64;
            batches += 1;
            let mut grads = s.graph.backward(loss);
            let pg = s.param_grads(&mut grads);
            let updates = s.take_bn_updates();
            drop(s);
            adam.step(&mut snap.params, &pg);
            snap.params.apply_bn_updates(&updates);
        }
        let mean = total / batches.max(1) as f64;
        info!("classifier epoch {}: loss {mean:.4}", epoch + 1);
        epoch_loss.push(mean);
    }
    let val_accuracy = snap.accuracy_on(val, 256)?;
    snap.meta.set("val_accuracy", format!("{val_accuracy:.6}"));
    snap.meta.set("train_seed", cfg.seed);
    snap.meta.set("epochs", cfg.epochs);
    Ok((snap, ClassifierReport { val_accuracy, epoch_loss, degenerate }))
}

/// One cache entry per sample of `set`, sorted by id.
pub fn build_prob_cache(classifier: &ClassifierSnapshot, set: &ImageSet, batch_size: usize) -> Result<ProbCache> {
    let probs = classifier.predict_set(set, batch_size)?;
    let entries = set
        .ids
        .iter()
        .zip(&probs)
        .map(|(id, p)| ProbCacheEntry::from_raw(id, p))
        .collect::<Result<Vec<_>>>()?;
    ProbCache::new(classifier.config().class_count, entries)
}
