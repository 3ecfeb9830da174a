//! Counterfactual generation by intervening on the condition, r sweeps,
//! grid rendering and classifier-feature Fréchet distances.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierSnapshot;
use crate::data::{to_rgb_image, ImageSet};
use crate::error::{contract, Error, Result};
use crate::model::{argmax, ConditionVector, DecodeOptions, SeededNoise, VaexSnapshot, ZeroNoise, COUNTERFACTUAL_TEMPERATURE};
use crate::stochastic::{frechet_distance, FeatureStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum InterventionMode {
    #[default]
    ConditionOnly,
    /// Also overwrite the class channels of the sampled top latent.
    ConditionPlusTopLatent,
}

impl fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ConditionOnly => "condition_only",
            Self::ConditionPlusTopLatent => "condition_plus_top_latent",
        })
    }
}

impl FromStr for InterventionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condition_only" => Ok(Self::ConditionOnly),
            "condition_plus_top_latent" => Ok(Self::ConditionPlusTopLatent),
            other => Err(contract(format!("unknown intervention `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualRequest {
    pub sample_id: String,
    pub target: usize,
    pub r: f64,
    pub temperature: f64,
    pub seed: u64,
    pub intervention: InterventionMode,
}

impl CounterfactualRequest {
    pub fn new(sample_id: impl Into<String>, target: usize, r: f64, seed: u64) -> Self {
        Self {
            sample_id: sample_id.into(),
            target,
            r,
            temperature: COUNTERFACTUAL_TEMPERATURE,
            seed,
            intervention: InterventionMode::ConditionOnly,
        }
    }

    fn options(&self) -> DecodeOptions {
        DecodeOptions {
            r: self.r,
            temperature: self.temperature,
            top_latent_target: (self.intervention == InterventionMode::ConditionPlusTopLatent).then_some(self.target),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualResult {
    pub sample_id: String,
    pub target: usize,
    pub r: f64,
    pub seed: u64,
    /// `(3, H, W)` images.
    pub original: Tensor<f32>,
    pub reconstruction: Tensor<f32>,
    pub counterfactual: Tensor<f32>,
    pub probs_original: Vec<f64>,
    pub probs_counterfactual: Vec<f64>,
    pub success: bool,
}

impl CounterfactualResult {
    /// Whether `success` agrees with the stored probabilities.
    pub fn is_consistent(&self) -> bool {
        self.success == (argmax(&self.probs_counterfactual) == self.target)
    }
}

/// `do(ξ = δ_target)`.
pub fn intervene_condition(target: usize, class_count: usize) -> Result<ConditionVector> {
    ConditionVector::intervention(target, class_count)
}

/// The class a counterfactual should flip to: the next class after `predicted`.
pub fn opposite_class(predicted: usize, class_count: usize) -> usize {
    (predicted + 1) % class_count
}

/// Stable per-sample noise seed derived from a run seed and a sample id.
pub fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

fn squeeze(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape()[1..].to_vec();
    t.clone().reshape(&s).expect("same element count")
}

/// Images decoded from `x` under `do(ξ = δ_target)`; sample `i` draws its
/// noise from `seeds[i]` only, so results do not depend on batching.
pub fn counterfactual_images(
    model: &VaexSnapshot<f32>,
    x: &Tensor<f32>,
    targets: &[usize],
    opts: DecodeOptions,
    seeds: &[u64],
) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    if targets.len() != n || seeds.len() != n {
        return Err(contract("targets and seeds must match the batch"));
    }
    let c = model.config().class_count;
    let cond = targets.iter().map(|&t| intervene_condition(t, c)).collect::<Result<Vec<_>>>()?;
    let mut noise = SeededNoise::per_sample(seeds);
    model.model.reconstruct(&model.params, x, &cond, opts, &mut noise)
}

/// Deterministic reconstructions under the classifier's own condition.
pub fn reconstructions(model: &VaexSnapshot<f32>, x: &Tensor<f32>, cond: &[ConditionVector]) -> Result<Tensor<f32>> {
    model.model.reconstruct(&model.params, x, cond, DecodeOptions::training(), &mut ZeroNoise)
}

pub fn make_counterfactual(
    req: &CounterfactualRequest,
    data: &ImageSet,
    model: &VaexSnapshot<f32>,
    classifier: &ClassifierSnapshot,
) -> Result<CounterfactualResult> {
    let c = model.config().class_count;
    if req.target >= c {
        return Err(contract(format!("target class {} out of range for {c} classes", req.target)));
    }
    req.options().validate()?;
    let i = data.index_of(&req.sample_id).ok_or_else(|| Error::Lookup(req.sample_id.clone()))?;
    let x = data.gather(&[i]);
    let probs_original = classifier.predict_probs(&x)?.remove(0);
    let cond = ConditionVector::from_raw(probs_original.clone())?;
    let reconstruction = reconstructions(model, &x, &[cond])?;
    let cf = counterfactual_images(model, &x, &[req.target], req.options(), &[req.seed])?;
    let probs_counterfactual = classifier.predict_probs(&cf)?.remove(0);
    let success = argmax(&probs_counterfactual) == req.target;
    Ok(CounterfactualResult {
        sample_id: req.sample_id.clone(),
        target: req.target,
        r: req.r,
        seed: req.seed,
        original: squeeze(&x),
        reconstruction: squeeze(&reconstruction),
        counterfactual: squeeze(&cf),
        probs_original,
        probs_counterfactual,
        success,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub r_values: Vec<f64>,
    pub temperature: f64,
    pub intervention: InterventionMode,
    /// Run seed; each sample's noise seed is [`sample_seed`] of it.
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            r_values: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            temperature: COUNTERFACTUAL_TEMPERATURE,
            intervention: InterventionMode::ConditionOnly,
            seed: 0,
            batch_size: 64,
        }
    }
}

/// One row of the success table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub r: f64,
    pub success_percent: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub sample_ids: Vec<String>,
    pub targets: Vec<usize>,
    /// `success[s][j]`: sample `s` at `r_values[j]`.
    pub success: Vec<Vec<bool>>,
}

pub const SWEEP_TABLE_HEADER: &str = "r\tsuccess_percent\tn";

impl SweepReport {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{SWEEP_TABLE_HEADER}\n");
        for row in &self.rows {
            s.push_str(&format!("{}\t{:.2}\t{}\n", row.r, row.success_percent, row.n));
        }
        s
    }

    /// Largest rise in success from one r to the next, in percentage points.
    pub fn max_increase(&self) -> f64 {
        self.rows.windows(2).map(|w| w[1].success_percent - w[0].success_percent).fold(0.0, f64::max)
    }
}

/// Counterfactuals of every listed sample at every r. When `grid_dir` is
/// given, writes `<id>_sweep.png` per sample: the original, then one tile per r.
pub fn r_sweep(
    data: &ImageSet,
    sample_ids: &[String],
    targets: &[usize],
    cfg: &SweepConfig,
    model: &VaexSnapshot<f32>,
    classifier: &ClassifierSnapshot,
    grid_dir: Option<&Path>,
) -> Result<SweepReport> {
    if sample_ids.len() != targets.len() {
        return Err(contract("one target per sample required"));
    }
    if sample_ids.is_empty() || cfg.r_values.is_empty() {
        return Err(contract("a sweep needs samples and r values"));
    }
    let c = model.config().class_count;
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(contract(format!("target class {t} out of range")));
    }
    for &r in &cfg.r_values {
        DecodeOptions::relaxed(r, cfg.temperature).validate()?;
    }
    let indices = sample_ids
        .iter()
        .map(|id| data.index_of(id).ok_or_else(|| Error::Lookup(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = grid_dir {
        fs::create_dir_all(dir)?;
    }
    let mut success = vec![vec![false; cfg.r_values.len()]; sample_ids.len()];
    let positions: Vec<usize> = (0..indices.len()).collect();
    for chunk in positions.chunks(cfg.batch_size.max(1)) {
        let idx: Vec<usize> = chunk.iter().map(|&p| indices[p]).collect();
        let x = data.gather(&idx);
        let tg: Vec<usize> = chunk.iter().map(|&p| targets[p]).collect();
        let seeds: Vec<u64> = chunk.iter().map(|&p| sample_seed(cfg.seed, &sample_ids[p])).collect();
        let mut tiles: Vec<Vec<Tensor<f32>>> = chunk.iter().map(|&p| vec![squeeze(&data.gather(&[indices[p]]))]).collect();
        for (j, &r) in cfg.r_values.iter().enumerate() {
            let opts = DecodeOptions {
                r,
                temperature: cfg.temperature,
                top_latent_target: None,
            };
            let cf = if cfg.intervention == InterventionMode::ConditionPlusTopLatent {
                // the overwritten channels depend on the target, so decode per target
                let mut parts = Vec::with_capacity(chunk.len());
                for (b, &t) in tg.iter().enumerate() {
                    let o = DecodeOptions { top_latent_target: Some(t), ..opts };
                    parts.push(counterfactual_images(model, &x.batch_item(b), &[t], o, &[seeds[b]])?);
                }
                Tensor::stack_batch(&parts)?
            } else {
                counterfactual_images(model, &x, &tg, opts, &seeds)?
            };
            let probs = classifier.predict_probs(&cf)?;
            for (b, &p) in chunk.iter().enumerate() {
                success[p][j] = argmax(&probs[b]) == targets[p];
                if grid_dir.is_some() {
                    tiles[b].push(squeeze(&cf.batch_item(b)));
                }
            }
        }
        if let Some(dir) = grid_dir {
            for (b, &p) in chunk.iter().enumerate() {
                render_grid(&tiles[b])?.save(dir.join(format!("{}_sweep.png", sample_ids[p])))?;
            }
        }
    }
    let n = sample_ids.len();
    let rows = cfg
        .r_values
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            let hits = success.iter().filter(|s| s[j]).count();
            SweepRow { r, success_percent: 100.0 * hits as f64 / n as f64, n }
        })
        .collect();
    Ok(SweepReport { rows, sample_ids: sample_ids.to_vec(), targets: targets.to_vec(), success })
}

/// Width of the white border around and between grid tiles.
pub const GRID_BORDER: u32 = 2;

/// Tiles side by side on white, separated by [`GRID_BORDER`] pixels.
pub fn render_grid(tiles: &[Tensor<f32>]) -> Result<RgbImage> {
    let first = tiles.first().ok_or_else(|| contract("grid needs at least one tile"))?;
    let (h, w) = (first.shape()[first.shape().len() - 2] as u32, first.shape()[first.shape().len() - 1] as u32);
    let n = tiles.len() as u32;
    let mut grid = RgbImage::from_pixel(n * w + (n + 1) * GRID_BORDER, h + 2 * GRID_BORDER, Rgb([255, 255, 255]));
    for (i, t) in tiles.iter().enumerate() {
        let tile = to_rgb_image(t)?;
        if tile.dimensions() != (w, h) {
            return Err(contract("grid tiles differ in size"));
        }
        let x0 = GRID_BORDER + i as u32 * (w + GRID_BORDER);
        image::imageops::replace(&mut grid, &tile, x0 as i64, GRID_BORDER as i64);
    }
    Ok(grid)
}

/// Fréchet distance between two image sets in the classifier's feature space,
/// using at most `max_per_side` images of each.
pub fn fid_eval(a: &Tensor<f32>, b: &Tensor<f32>, classifier: &ClassifierSnapshot, max_per_side: usize) -> Result<f64> {
    if a.shape().first() == Some(&0) || b.shape().first() == Some(&0) || a.numel() == 0 || b.numel() == 0 {
        return Err(contract("FID needs two nonempty sets"));
    }
    let mut fa = classifier.features_of(a, 128)?;
    let mut fb = classifier.features_of(b, 128)?;
    fa.truncate(max_per_side);
    fb.truncate(max_per_side);
    frechet_distance(&FeatureStats::fit(&fa)?, &FeatureStats::fit(&fb)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_interventions_are_one_hot() {
        let c = intervene_condition(1, 2).unwrap();
        assert_eq!(c.raw, vec![0.0, 1.0]);
        assert_eq!(c.recentered, c.raw);
        assert_eq!(intervene_condition(0, 2).unwrap().raw, vec![1.0, 0.0]);
        assert!(intervene_condition(2, 2).is_err());
    }

    #[test]
    fn grid_layout() {
        let tiles: Vec<Tensor<f32>> = (0..7).map(|i| Tensor::full(&[3, 8, 8], i as f32 / 7.0)).collect();
        let g = render_grid(&tiles).unwrap();
        assert_eq!(g.dimensions(), (7 * 8 + 8 * GRID_BORDER, 8 + 2 * GRID_BORDER));
        assert_eq!(g.get_pixel(0, 0), &Rgb([255, 255, 255]));
        assert_eq!(g.get_pixel(GRID_BORDER + 8, 5), &Rgb([255, 255, 255]));
        assert_eq!(g.get_pixel(GRID_BORDER, GRID_BORDER), &Rgb([0, 0, 0]));
    }

    #[test]
    fn sweep_table_format() {
        let rep = SweepReport {
            rows: vec![SweepRow { r: 0.0, success_percent: 95.0, n: 20 }, SweepRow { r: 0.5, success_percent: 96.5, n: 20 }],
            sample_ids: vec![],
            targets: vec![],
            success: vec![],
        };
        assert_eq!(rep.to_tsv(), "r\tsuccess_percent\tn\n0\t95.00\t20\n0.5\t96.50\t20\n");
        assert!((rep.max_increase() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn sample_seeds_differ_by_id() {
        assert_eq!(sample_seed(3, "s0001"), sample_seed(3, "s0001"));
        assert_ne!(sample_seed(3, "s0001"), sample_seed(3, "s0002"));
        assert_ne!(sample_seed(3, "s0001"), sample_seed(4, "s0001"));
    }

    #[test]
    fn intervention_mode_names() {
        for m in [InterventionMode::ConditionOnly, InterventionMode::ConditionPlusTopLatent] {
            assert_eq!(m.to_string().parse::<InterventionMode>().unwrap(), m);
        }
    }
}
