use crate::autograd::Var;
use crate::error::{contract, Result};
use crate::nn::{
    adain, condition_channels, seeded_rng, BatchNorm2d, BlockConfig, Conv2d, Linear, Mode, ParamBuilder, ParamId,
    ParamStore, ResidualBlock, ResolutionChange, Session,
};
use crate::stochastic::DiagGaussian;
use crate::tensor::{Float, Tensor};

use super::{ConditionVector, ModelConfig, NoiseSource, Variant};

/// Init gain of the convolutions emitting distribution parameters, so that
/// priors start near N(0, 1) and residuals near zero.
const HEAD_GAIN: f64 = 0.1;

/// Sampling temperature used for counterfactual generation.
pub const COUNTERFACTUAL_TEMPERATURE: f64 = 1.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    /// Relaxation in `[0, 1]`; layer `k` keeps `r^k` of its encoder residual.
    pub r: f64,
    pub temperature: f64,
    /// Overwrite the first `C - 1` channels of `z_0` with `s·δ_{c,target}`.
    pub top_latent_target: Option<usize>,
}

impl DecodeOptions {
    /// `r = 1`, temperature 1: the parameterization optimized in training.
    pub fn training() -> Self {
        Self { r: 1.0, temperature: 1.0, top_latent_target: None }
    }

    pub fn relaxed(r: f64, temperature: f64) -> Self {
        Self { r, temperature, top_latent_target: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(contract(format!("r = {} outside [0, 1]", self.r)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(contract("temperature must be positive"));
        }
        Ok(())
    }
}

/// `r^k` with `0^0 = 1`.
pub fn relaxation_factor(r: f64, k: usize) -> f64 {
    if k == 0 {
        1.0
    } else {
        r.powi(k as i32)
    }
}

/// Posterior parameters `prior + r^k · Δ`.
pub fn effective_posterior<T: Float>(
    prior: &DiagGaussian<T>,
    delta: &DiagGaussian<T>,
    r: f64,
    k: usize,
) -> Result<DiagGaussian<T>> {
    if prior.shape() != delta.shape() {
        return Err(contract(format!("prior {:?} vs delta {:?}", prior.shape(), delta.shape())));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(contract(format!("r = {r} outside [0, 1]")));
    }
    let f = T::of(relaxation_factor(r, k));
    let mean = prior.mean.zip_map(&delta.mean, |p, d| p + d * f);
    let log_std = prior.log_std.zip_map(&delta.log_std, |p, d| p + d * f);
    DiagGaussian::new(mean, log_std)
}

/// Graph handles of one latent layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub prior_mean: Var,
    pub prior_log_std: Var,
    pub delta_mean: Var,
    pub delta_log_std: Var,
    pub post_mean: Var,
    pub post_log_std: Var,
    pub z: Var,
    /// Per-sample `KL(posterior || prior)`, shape `(N)`.
    pub kl: Var,
}

/// Graph handles of a forward pass.
#[derive(Clone, Debug)]
pub struct GraphTrace {
    pub reconstruction: Var,
    pub layers: Vec<LayerVars>,
    pub h: Vec<Var>,
    pub d: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentLayerState<T> {
    pub prior: DiagGaussian<T>,
    pub delta: DiagGaussian<T>,
    pub posterior: DiagGaussian<T>,
    pub z: Tensor<T>,
    /// Per-sample KL of this layer.
    pub kl: Vec<f64>,
}

/// Materialized forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T> {
    pub reconstruction: Tensor<T>,
    /// Top (`k = 0`) first.
    pub layers: Vec<LatentLayerState<T>>,
    /// Encoder features, finest first; empty for pure generation.
    pub h_features: Vec<Tensor<T>>,
    /// Decoder features `d_0 … d_{K+1}`.
    pub d_features: Vec<Tensor<T>>,
    pub d0: Tensor<T>,
}

impl<T: Float> ForwardTrace<T> {
    /// Per-sample KL summed over layers.
    pub fn total_kl(&self) -> Vec<f64> {
        let n = self.reconstruction.shape()[0];
        (0..n).map(|i| self.layers.iter().map(|l| l.kl[i]).sum()).collect()
    }

    fn from_graph(s: &Session<'_, T>, g: &GraphTrace) -> Result<Self> {
        let v = |var: Var| s.value(var).clone();
        let layers = g
            .layers
            .iter()
            .map(|l| {
                Ok(LatentLayerState {
                    prior: DiagGaussian::new(v(l.prior_mean), v(l.prior_log_std))?,
                    delta: DiagGaussian::new(v(l.delta_mean), v(l.delta_log_std))?,
                    posterior: DiagGaussian::new(v(l.post_mean), v(l.post_log_std))?,
                    z: v(l.z),
                    kl: s.value(l.kl).to_f64_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            reconstruction: v(g.reconstruction),
            layers,
            h_features: g.h.iter().map(|&h| v(h)).collect(),
            d_features: g.d.iter().map(|&d| v(d)).collect(),
            d0: v(g.d[0]),
        })
    }
}

#[derive(Clone, Debug)]
enum Combine {
    /// `d + conv1x1(z)`; the AdaIN sits in the next prior.
    Inject { conv: Conv2d },
    Concat { block: ResidualBlock },
}

/// Folds `z_k` into `d_k`, appends the condition planes and moves to the
/// next resolution.
#[derive(Clone, Debug)]
struct Step {
    combine: Combine,
    block: ResidualBlock,
}

/// Prior of `z_k`, `k >= 1`, from `d_k`. In the AdaIN variant `z_{k-1}`
/// restyles `d_k` before the head.
#[derive(Clone, Debug)]
struct PriorNet {
    style: Option<Linear>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
struct DeltaNet {
    block: ResidualBlock,
    head: Conv2d,
}

/// The hierarchical conditional VAE. Holds parameter ids only; values live in
/// a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Vaex {
    cfg: ModelConfig,
    enc_stem: Conv2d,
    enc_pre: Vec<ResidualBlock>,
    enc_blocks: Vec<ResidualBlock>,
    d0: ParamId,
    deltas: Vec<DeltaNet>,
    priors: Vec<PriorNet>,
    steps: Vec<Step>,
    out_blocks: Vec<ResidualBlock>,
    out_bn: BatchNorm2d,
    out_conv: Conv2d,
}

fn block<T: Float>(
    pb: &mut ParamBuilder<'_, T>,
    cfg: &ModelConfig,
    c_in: usize,
    c_out: usize,
    change: ResolutionChange,
) -> Result<ResidualBlock> {
    let mut bc = BlockConfig::new(c_in, c_out, change).with_depth(cfg.block_depth);
    bc.bn_momentum = cfg.bn_momentum;
    bc.se_reduction = cfg.se_reduction;
    ResidualBlock::new(pb, bc)
}

fn change_between(from: usize, to: usize) -> ResolutionChange {
    if to == from {
        ResolutionChange::None
    } else if to == 2 * from {
        ResolutionChange::Up2
    } else {
        ResolutionChange::Down2
    }
}

impl Vaex {
    /// Registers freshly initialized parameters in `store`.
    pub fn build<T: Float>(cfg: ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let mut root = ParamBuilder::new(store, &mut rng);
        let k = cfg.k();
        let c1 = cfg.class_count - 1;
        let zc = cfg.latent_channels;
        let res = cfg.latent_resolutions.clone();
        let w = |r: usize| cfg.width_at(r);

        let mut pb = root.pp("enc");
        let enc_stem = Conv2d::new(&mut pb.pp("stem"), cfg.image_channels + c1, w(cfg.image_size), 3, 1, 1, true, 1.0);
        let mut cur = cfg.image_size;
        let mut enc_pre = Vec::new();
        while cur > res[k] {
            let i = enc_pre.len();
            enc_pre.push(block(&mut pb.pp(&format!("pre{i}")), &cfg, w(cur), w(cur / 2), ResolutionChange::Down2)?);
            cur /= 2;
        }
        let mut enc_blocks = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let target = res[k - j];
            enc_blocks.push(block(&mut pb.pp(&format!("h{j}")), &cfg, w(cur), w(target), change_between(cur, target))?);
            cur = target;
        }

        let mut pb = root.pp("dec");
        let d0 = pb.normal("d0", &[1, w(res[0]), res[0], res[0]], 1.0);
        let mut deltas = Vec::with_capacity(k + 1);
        let mut priors = Vec::with_capacity(k);
        let mut steps = Vec::with_capacity(k + 1);
        for layer in 0..=k {
            let wl = w(res[layer]);
            let mut lp = pb.pp(&format!("layer{layer}"));
            deltas.push(DeltaNet {
                block: block(&mut lp.pp("delta.block"), &cfg, 2 * wl, wl, ResolutionChange::None)?,
                head: Conv2d::new(&mut lp.pp("delta.head"), wl, 2 * zc, 3, 1, 1, true, HEAD_GAIN),
            });
            if layer > 0 {
                let style = match cfg.variant {
                    Variant::Adain => Some(Linear::new(&mut lp.pp("style"), zc, 2 * wl, HEAD_GAIN)),
                    Variant::Concat => None,
                };
                let head = Conv2d::new(&mut lp.pp("prior"), wl + c1, 2 * zc, 3, 1, 1, true, HEAD_GAIN);
                priors.push(PriorNet { style, head });
            }
            let combine = match cfg.variant {
                Variant::Adain => Combine::Inject { conv: Conv2d::new(&mut lp.pp("inject"), zc, wl, 1, 1, 0, true, 1.0) },
                Variant::Concat => Combine::Concat {
                    block: block(&mut lp.pp("bottleneck"), &cfg, wl + zc, wl, ResolutionChange::None)?,
                },
            };
            let next = if layer < k { res[layer + 1] } else { res[k] };
            let step_block = block(&mut lp.pp("step"), &cfg, wl + c1, w(next), change_between(res[layer], next))?;
            steps.push(Step { combine, block: step_block });
        }
        let mut cur = res[k];
        let mut out_blocks = Vec::new();
        while cur < cfg.image_size {
            let i = out_blocks.len();
            out_blocks.push(block(&mut pb.pp(&format!("up{i}")), &cfg, w(cur), w(cur * 2), ResolutionChange::Up2)?);
            cur *= 2;
        }
        let out_bn = BatchNorm2d::new(&mut pb.pp("out.bn"), w(cfg.image_size), cfg.bn_momentum);
        let out_conv = Conv2d::new(&mut pb.pp("out.conv"), w(cfg.image_size), cfg.image_channels, 3, 1, 1, true, 1.0);

        Ok(Self { cfg, enc_stem, enc_pre, enc_blocks, d0, deltas, priors, steps, out_blocks, out_bn, out_conv })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_cond(&self, cond: &[ConditionVector], n: usize) -> Result<()> {
        if cond.len() != n {
            return Err(contract(format!("{} condition vectors for a batch of {n}", cond.len())));
        }
        if cond.iter().any(|c| c.class_count() != self.cfg.class_count) {
            return Err(contract(format!("condition vectors must have {} classes", self.cfg.class_count)));
        }
        Ok(())
    }

    /// Encoder features `h_0 … h_K`, finest first.
    pub fn encode_bottom_up<T: Float>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        cond: &[ConditionVector],
    ) -> Result<Vec<Var>> {
        let shape = s.graph.shape(x).to_vec();
        let [c, hgt, wid] = self.cfg.image_shape();
        if shape.len() != 4 || shape[1..] != [c, hgt, wid] || shape[0] == 0 {
            return Err(contract(format!("image batch {shape:?} does not match (N, {c}, {hgt}, {wid})")));
        }
        self.check_cond(cond, shape[0])?;
        let input = condition_channels(s, x, cond)?;
        let mut f = self.enc_stem.forward(s, input);
        for b in &self.enc_pre {
            f = b.forward(s, f);
        }
        let mut h = Vec::with_capacity(self.enc_blocks.len());
        for b in &self.enc_blocks {
            f = b.forward(s, f);
            h.push(f);
        }
        Ok(h)
    }

    fn top_prior<T: Float>(&self, s: &mut Session<'_, T>, cond: &[ConditionVector]) -> (Var, Var) {
        let r0 = self.cfg.latent_resolutions[0];
        let zc = self.cfg.latent_channels;
        let plane = r0 * r0;
        let mut mean = Vec::with_capacity(cond.len() * zc * plane);
        for v in cond {
            for ch in 0..zc {
                let m = if ch + 1 < self.cfg.class_count { self.cfg.condition_scale * v.recentered[ch] } else { 0.0 };
                mean.extend(std::iter::repeat_n(T::of(m), plane));
            }
        }
        let shape = [cond.len(), zc, r0, r0];
        let m = s.constant(Tensor::from_vec(&shape, mean).expect("prior shape"));
        let l = s.constant(Tensor::zeros(&shape));
        (m, l)
    }

    fn split_head<T: Float>(&self, s: &mut Session<'_, T>, out: Var) -> (Var, Var) {
        let zc = self.cfg.latent_channels;
        let m = s.graph.slice_channels(out, 0, zc);
        let l = s.graph.slice_channels(out, zc, zc);
        (m, l)
    }

    fn combine<T: Float>(&self, s: &mut Session<'_, T>, step: &Step, d: Var, z: Var) -> Var {
        match &step.combine {
            Combine::Inject { conv } => {
                let injected = conv.forward(s, z);
                s.graph.add(d, injected)
            }
            Combine::Concat { block } => {
                let cat = s.graph.concat_channels(&[d, z]);
                block.forward(s, cat)
            }
        }
    }

    fn prior<T: Float>(
        &self,
        s: &mut Session<'_, T>,
        net: &PriorNet,
        d: Var,
        z_prev: Var,
        cond: &[ConditionVector],
    ) -> Result<(Var, Var)> {
        let f = match &net.style {
            Some(style) => {
                let pooled = s.graph.mean_hw(z_prev);
                let st = style.forward(s, pooled);
                let width = s.graph.shape(d)[1];
                let mean = s.graph.slice_channels(st, 0, width);
                let log_std = s.graph.slice_channels(st, width, width);
                let std = s.graph.exp(log_std);
                adain(s, d, mean, std)
            }
            None => d,
        };
        let act = s.graph.hard_swish(f);
        let input = condition_channels(s, act, cond)?;
        let out = net.head.forward(s, input);
        Ok(self.split_head(s, out))
    }

    /// Top-down pass. With `h` absent every layer samples its prior.
    pub fn decode_top_down<T: Float>(
        &self,
        s: &mut Session<'_, T>,
        h: Option<&[Var]>,
        cond: &[ConditionVector],
        opts: DecodeOptions,
        noise: &mut dyn NoiseSource<T>,
    ) -> Result<GraphTrace> {
        opts.validate()?;
        let k_max = self.cfg.k();
        let n = cond.len();
        if n == 0 {
            return Err(contract("empty batch"));
        }
        self.check_cond(cond, n)?;
        if let Some(h) = h {
            if h.len() != k_max + 1 {
                return Err(contract(format!("expected {} encoder features, got {}", k_max + 1, h.len())));
            }
            if h.iter().any(|&v| s.graph.shape(v)[0] != n) {
                return Err(contract("encoder features and conditions differ in batch size"));
            }
        }
        if let Some(t) = opts.top_latent_target {
            if t >= self.cfg.class_count {
                return Err(contract(format!("target class {t} out of range")));
            }
        }

        let seed = s.p(self.d0);
        let mut d = s.graph.expand_batch(seed, n);
        let mut ds = vec![d];
        let mut layers: Vec<LayerVars> = Vec::with_capacity(k_max + 1);
        for k in 0..=k_max {
            let (pm, pl) = if k == 0 {
                self.top_prior(s, cond)
            } else {
                self.prior(s, &self.priors[k - 1], d, layers[k - 1].z, cond)?
            };
            let (dm, dl, qm, ql) = match h {
                Some(h) => {
                    let net = &self.deltas[k];
                    let cat = s.graph.concat_channels(&[h[k_max - k], d]);
                    let f = net.block.forward(s, cat);
                    let f = s.graph.hard_swish(f);
                    let out = net.head.forward(s, f);
                    let (dm, dl) = self.split_head(s, out);
                    let factor = relaxation_factor(opts.r, k);
                    let sm = s.graph.scale(dm, factor);
                    let sl = s.graph.scale(dl, factor);
                    let qm = s.graph.add(pm, sm);
                    let ql = s.graph.add(pl, sl);
                    (dm, dl, qm, ql)
                }
                None => {
                    let zero = Tensor::zeros(s.graph.shape(pm));
                    let dm = s.constant(zero.clone());
                    let dl = s.constant(zero);
                    (dm, dl, pm, pl)
                }
            };
            let shape = s.graph.shape(qm).to_vec();
            let t = T::of(opts.temperature);
            let eps = noise.standard_normal(&shape).map(|e| e * t);
            let eps = s.constant(eps);
            let std = s.graph.exp(ql);
            let spread = s.graph.mul(std, eps);
            let mut z = s.graph.add(qm, spread);
            if k == 0 {
                if let Some(target) = opts.top_latent_target {
                    z = self.override_top(s, z, target);
                }
            }
            let kl = s.graph.kl_diag(qm, ql, pm, pl);
            layers.push(LayerVars {
                prior_mean: pm,
                prior_log_std: pl,
                delta_mean: dm,
                delta_log_std: dl,
                post_mean: qm,
                post_log_std: ql,
                z,
                kl,
            });
            let step = &self.steps[k];
            let c = self.combine(s, step, d, z);
            let c = condition_channels(s, c, cond)?;
            d = step.block.forward(s, c);
            ds.push(d);
        }
        for b in &self.out_blocks {
            d = b.forward(s, d);
        }
        let f = self.out_bn.forward(s, d);
        let f = s.graph.hard_swish(f);
        let logits = self.out_conv.forward(s, f);
        let reconstruction = s.graph.sigmoid(logits);
        Ok(GraphTrace { reconstruction, layers, h: h.map(|h| h.to_vec()).unwrap_or_default(), d: ds })
    }

    fn override_top<T: Float>(&self, s: &mut Session<'_, T>, z: Var, target: usize) -> Var {
        let c1 = self.cfg.class_count - 1;
        let shape = s.graph.shape(z).to_vec();
        let mut planes = shape.clone();
        planes[1] = c1;
        let fixed = intervene_top_latent(&Tensor::zeros(&planes), target, self.cfg.condition_scale, self.cfg.class_count);
        let fixed = s.constant(fixed);
        let rest = s.graph.slice_channels(z, c1, shape[1] - c1);
        s.graph.concat_channels(&[fixed, rest])
    }

    /// Encode (when `x` is given) and decode in one graph.
    pub fn forward<T: Float>(
        &self,
        s: &mut Session<'_, T>,
        x: Option<Var>,
        cond: &[ConditionVector],
        opts: DecodeOptions,
        noise: &mut dyn NoiseSource<T>,
    ) -> Result<GraphTrace> {
        let h = match x {
            Some(x) => Some(self.encode_bottom_up(s, x, cond)?),
            None => None,
        };
        self.decode_top_down(s, h.as_deref(), cond, opts, noise)
    }

    /// Evaluation-mode forward pass on concrete tensors.
    pub fn trace<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: Option<&Tensor<T>>,
        cond: &[ConditionVector],
        opts: DecodeOptions,
        noise: &mut dyn NoiseSource<T>,
    ) -> Result<ForwardTrace<T>> {
        let mut s = Session::new(params, Mode::Eval);
        let xv = x.map(|x| s.constant(x.clone()));
        let g = self.forward(&mut s, xv, cond, opts, noise)?;
        ForwardTrace::from_graph(&s, &g)
    }

    /// Images only.
    pub fn reconstruct<T: Float>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        cond: &[ConditionVector],
        opts: DecodeOptions,
        noise: &mut dyn NoiseSource<T>,
    ) -> Result<Tensor<T>> {
        let mut s = Session::new(params, Mode::Eval);
        let xv = s.constant(x.clone());
        let g = self.forward(&mut s, Some(xv), cond, opts, noise)?;
        Ok(s.value(g.reconstruction).clone())
    }

    /// Pure generation from the conditional prior.
    pub fn generate<T: Float>(
        &self,
        params: &ParamStore<T>,
        cond: &[ConditionVector],
        temperature: f64,
        noise: &mut dyn NoiseSource<T>,
    ) -> Result<Tensor<T>> {
        let mut s = Session::new(params, Mode::Eval);
        let g = self.forward(&mut s, None, cond, DecodeOptions::relaxed(1.0, temperature), noise)?;
        Ok(s.value(g.reconstruction).clone())
    }
}

/// Sets channels `c < C - 1` of `z0 (N, ch, h, w)` to the constant
/// `s·δ_{c,target}`; the remaining channels are left untouched.
pub fn intervene_top_latent<T: Float>(z0: &Tensor<T>, target: usize, scale: f64, class_count: usize) -> Tensor<T> {
    let (n, ch, h, w) = z0.dims4();
    let c1 = (class_count - 1).min(ch);
    let plane = h * w;
    let mut out = z0.clone();
    let data = out.data_mut();
    for b in 0..n {
        for c in 0..c1 {
            let v = if c == target { T::of(scale) } else { T::zero() };
            data[(b * ch + c) * plane..(b * ch + c + 1) * plane].fill(v);
        }
    }
    out
}
