use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::ParamStore;
use crate::stochastic::PixelVarianceTracker;
use crate::tensor::Float;

use super::{ModelConfig, Vaex};

const KIND: &str = "vaex";
const MODEL_PREFIX: &str = "model.";
const PIXEL_VARIANCE: &str = "pixel_variance";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct VaexSnapshot<T: Float> {
    pub model: Vaex,
    pub params: ParamStore<T>,
    pub pixel_variance: PixelVarianceTracker<T>,
    /// Free-form provenance (epoch, step, seeds).
    pub meta: KvMap,
}

impl<T: Float> VaexSnapshot<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let shape = cfg.image_shape();
        let model = Vaex::build(cfg, &mut params, seed)?;
        let mut meta = KvMap::new();
        meta.set("init_seed", seed);
        Ok(Self { model, params, pixel_variance: PixelVarianceTracker::new(&shape), meta })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = KvMap::new();
        header.set("kind", KIND);
        for (k, v) in self.config().to_kv().iter() {
            header.set(&format!("{MODEL_PREFIX}{k}"), v);
        }
        header.set("tracker.momentum", self.pixel_variance.momentum);
        header.set("tracker.floor", self.pixel_variance.floor);
        for (k, v) in self.meta.iter() {
            header.set(&format!("meta.{k}"), v);
        }
        let mut ck = Checkpoint::new(header);
        ck.tensors = self.params.named().map(|(n, t)| (n.to_string(), t.cast())).collect();
        ck.tensors.push((PIXEL_VARIANCE.to_string(), self.pixel_variance.variance.cast()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.get("kind") != Some(KIND) {
            return Err(Error::Format("checkpoint does not hold a VAEX model".into()));
        }
        let mut model_kv = KvMap::new();
        let mut meta = KvMap::new();
        for (k, v) in ck.header.iter() {
            if let Some(rest) = k.strip_prefix(MODEL_PREFIX) {
                model_kv.set(rest, v);
            } else if let Some(rest) = k.strip_prefix("meta.") {
                meta.set(rest, v);
            }
        }
        let cfg = ModelConfig::from_kv(&model_kv)?;
        let mut snap = Self::init(cfg, 0)?;
        let mut named = Vec::with_capacity(ck.tensors.len());
        let mut variance = None;
        for (name, t) in &ck.tensors {
            if name == PIXEL_VARIANCE {
                variance = Some(t.cast());
            } else {
                named.push((name.clone(), t.cast()));
            }
        }
        snap.params.load_named(named)?;
        let variance = variance.ok_or_else(|| Error::Format("checkpoint lacks pixel variance".into()))?;
        if variance.shape() != snap.pixel_variance.variance.shape() {
            return Err(Error::Format("pixel variance shape mismatch".into()));
        }
        snap.pixel_variance.variance = variance;
        snap.pixel_variance.momentum = ck.header.require("tracker.momentum")?;
        snap.pixel_variance.floor = ck.header.require("tracker.floor")?;
        snap.meta = meta;
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
