use std::fmt;
use std::str::FromStr;

use crate::error::{contract, Error, Result};
use crate::kv::{join_list, KvMap};

/// How `z_{k-1}` enters the features that parameterize the next prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Adaptive instance normalization driven by `z_{k-1}`.
    Adain,
    /// Concatenation followed by a bottleneck residual block.
    Concat,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Adain => "adain",
            Variant::Concat => "concat",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adain" => Ok(Variant::Adain),
            "concat" => Ok(Variant::Concat),
            other => Err(Error::Format(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub class_count: usize,
    /// Channels of every latent layer.
    pub latent_channels: usize,
    /// Spatial side of `z_0 … z_K`, top (coarsest) first.
    pub latent_resolutions: Vec<usize>,
    /// Feature channels per resolution level, from `latent_resolutions[0]`
    /// doubling up to `image_size`.
    pub widths: Vec<usize>,
    /// Shift `s` of the top prior mean.
    pub condition_scale: f64,
    pub variant: Variant,
    pub block_depth: usize,
    pub bn_momentum: f64,
    pub se_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32×32 RGB, K = 4.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            class_count: 2,
            latent_channels: 8,
            latent_resolutions: vec![4, 4, 8, 16, 32],
            widths: vec![32, 32, 16, 16],
            condition_scale: 5.0,
            variant: Variant::Adain,
            block_depth: 2,
            bn_momentum: 0.95,
            se_reduction: 4,
        }
    }

    /// 8×8 RGB, K = 2, four feature channels.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            image_channels: 3,
            class_count: 2,
            latent_channels: 2,
            latent_resolutions: vec![4, 4, 8],
            widths: vec![4, 4],
            condition_scale: 5.0,
            variant: Variant::Adain,
            block_depth: 2,
            bn_momentum: 0.95,
            se_reduction: 4,
        }
    }

    /// Number of latent layers below the top one.
    pub fn k(&self) -> usize {
        self.latent_resolutions.len().saturating_sub(1)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }

    pub fn pixel_dims(&self) -> usize {
        self.image_channels * self.image_size * self.image_size
    }

    /// Feature width at spatial side `res`.
    pub fn width_at(&self, res: usize) -> usize {
        let level = (res / self.latent_resolutions[0]).trailing_zeros() as usize;
        self.widths[level]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k < 2 {
            return Err(contract("at least three latent layers are required (K >= 2)"));
        }
        if self.class_count < 2 {
            return Err(contract("class_count must be at least 2"));
        }
        if self.latent_channels < self.class_count - 1 {
            return Err(contract("top latent needs at least C - 1 channels"));
        }
        if self.image_channels == 0 || self.block_depth == 0 {
            return Err(contract("image_channels and block_depth must be positive"));
        }
        let r = &self.latent_resolutions;
        if r[0] == 0 || !r[0].is_power_of_two() {
            return Err(contract("top latent resolution must be a power of two"));
        }
        if r.windows(2).any(|p| p[1] != p[0] && p[1] != 2 * p[0]) {
            return Err(contract("latent resolutions must stay equal or double toward the pixels"));
        }
        let last = r[k];
        if self.image_size < last || self.image_size % last != 0 || !(self.image_size / last).is_power_of_two() {
            return Err(contract("image size must be the finest latent resolution times a power of two"));
        }
        let levels = (self.image_size / r[0]).trailing_zeros() as usize + 1;
        if self.widths.len() != levels {
            return Err(contract(format!("expected {levels} widths, got {}", self.widths.len())));
        }
        if self.widths.iter().any(|&w| w == 0 || w % self.se_reduction.max(1) != 0) || self.se_reduction == 0 {
            return Err(contract("every width must be a positive multiple of se_reduction"));
        }
        if !self.condition_scale.is_finite() {
            return Err(contract("condition_scale must be finite"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(contract("bn_momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("image_size", self.image_size);
        m.set("image_channels", self.image_channels);
        m.set("class_count", self.class_count);
        m.set("latent_channels", self.latent_channels);
        m.set("latent_resolutions", join_list(&self.latent_resolutions));
        m.set("widths", join_list(&self.widths));
        m.set("condition_scale", self.condition_scale);
        m.set("variant", self.variant);
        m.set("block_depth", self.block_depth);
        m.set("bn_momentum", self.bn_momentum);
        m.set("se_reduction", self.se_reduction);
        m
    }

    /// Missing keys fall back to the desk defaults.
    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = Self::desk();
        let cfg = Self {
            image_size: m.parse_or("image_size", d.image_size)?,
            image_channels: m.parse_or("image_channels", d.image_channels)?,
            class_count: m.parse_or("class_count", d.class_count)?,
            latent_channels: m.parse_or("latent_channels", d.latent_channels)?,
            latent_resolutions: m.parse_list("latent_resolutions")?.unwrap_or(d.latent_resolutions),
            widths: m.parse_list("widths")?.unwrap_or(d.widths),
            condition_scale: m.parse_or("condition_scale", d.condition_scale)?,
            variant: m.parse_or("variant", d.variant)?,
            block_depth: m.parse_or("block_depth", d.block_depth)?,
            bn_momentum: m.parse_or("bn_momentum", d.bn_momentum)?,
            se_reduction: m.parse_or("se_reduction", d.se_reduction)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
