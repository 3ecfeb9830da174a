use crate::autograd::Var;
use crate::error::{contract, Result};
use crate::model::ConditionVector;
use crate::tensor::{Float, Tensor};

use super::{Mode, ParamBuilder, ParamId, Session};

pub const BN_EPS: f64 = 1e-5;
pub const ADAIN_EPS: f64 = 1e-5;

/// Elementwise `x * clamp(x + 3, 0, 6) / 6`.
pub fn hard_swish<T: Float>(s: &mut Session<'_, T>, x: Var) -> Var {
    s.graph.hard_swish(x)
}

/// Batch normalization with learned affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize, momentum: f64) -> Self {
        Self {
            gamma: pb.constant("gamma", &[channels], 1.0),
            beta: pb.constant("beta", &[channels], 0.0),
            running_mean: pb.buffer("running_mean", &[channels], 0.0),
            running_var: pb.buffer("running_var", &[channels], 1.0),
            momentum,
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let normalized = match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm_train(x, BN_EPS);
                s.record_bn(self.running_mean, self.running_var, self.momentum, stats);
                y
            }
            Mode::Eval => {
                let params = s.params();
                let (m, v) = (params.get(self.running_mean).data(), params.get(self.running_var).data());
                s.graph.batch_norm_eval(x, m, v, BN_EPS)
            }
        };
        let gamma = s.p(self.gamma);
        let beta = s.p(self.beta);
        let y = s.graph.mul_channel(normalized, gamma);
        s.graph.add_channel(y, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Regular,
    Transposed,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    kind: ConvKind,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let std = gain * (2.0 / (c_in * k * k) as f64).sqrt();
        Self {
            weight: pb.normal("weight", &[c_out, c_in, k, k], std),
            bias: bias.then(|| pb.constant("bias", &[c_out], 0.0)),
            kind: ConvKind::Regular,
            stride,
            pad,
        }
    }

    /// Learned ×2 upsampling (kernel 4, stride 2, padding 1).
    pub fn up2<T: Float>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, gain: f64) -> Self {
        // each output pixel receives c_in * 4 taps
        let std = gain * (2.0 / (c_in * 4) as f64).sqrt();
        Self {
            weight: pb.normal("weight", &[c_in, c_out, 4, 4], std),
            bias: None,
            kind: ConvKind::Transposed,
            stride: 2,
            pad: 1,
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let w = s.p(self.weight);
        let y = match self.kind {
            ConvKind::Regular => s.graph.conv2d(x, w, self.stride, self.pad),
            ConvKind::Transposed => s.graph.conv_transpose2d(x, w, self.stride, self.pad),
        };
        match self.bias {
            Some(b) => {
                let b = s.p(b);
                s.graph.add_channel(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, d_in: usize, d_out: usize, gain: f64) -> Self {
        Self {
            weight: pb.normal("weight", &[d_out, d_in], gain * (1.0 / d_in as f64).sqrt()),
            bias: pb.constant("bias", &[d_out], 0.0),
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        let y = s.graph.linear(x, w);
        s.graph.add_channel(y, b)
    }
}

/// Channel gating from globally pooled statistics.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self { reduce: Linear::new(&mut pb.pp("reduce"), channels, hidden, 1.0), expand: Linear::new(&mut pb.pp("expand"), hidden, channels, 1.0) }
    }

    /// Per-sample, per-channel gate in (0, 1).
    pub fn gate<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let pooled = s.graph.mean_hw(x);
        let h = self.reduce.forward(s, pooled);
        let h = s.graph.relu(h);
        let e = self.expand.forward(s, h);
        s.graph.sigmoid(e)
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let gate = self.gate(s, x);
        s.graph.mul_sample_channel(x, gate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResolutionChange {
    None,
    Down2,
    Up2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub resolution_change: ResolutionChange,
    pub depth: usize,
    pub bn_momentum: f64,
    pub se_reduction: usize,
}

impl BlockConfig {
    pub const DEFAULT_DEPTH: usize = 2;
    pub const DEFAULT_BN_MOMENTUM: f64 = 0.95;
    pub const DEFAULT_SE_REDUCTION: usize = 4;

    pub fn new(in_channels: usize, out_channels: usize, resolution_change: ResolutionChange) -> Self {
        Self {
            in_channels,
            out_channels,
            resolution_change,
            depth: Self::DEFAULT_DEPTH,
            bn_momentum: Self::DEFAULT_BN_MOMENTUM,
            se_reduction: Self::DEFAULT_SE_REDUCTION,
        }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(contract("block depth must be at least 1"));
        }
        if self.se_reduction == 0 || self.out_channels % self.se_reduction != 0 {
            return Err(contract(format!(
                "se_reduction {} must divide out_channels {}",
                self.se_reduction, self.out_channels
            )));
        }
        Ok(())
    }
}

/// `depth` x [BatchNorm → hard-Swish → Conv] → Squeeze-Excitation, added to a
/// skip path that is bilinearly resized and 1×1-projected when needed.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub cfg: BlockConfig,
    pub layers: Vec<(BatchNorm2d, Conv2d)>,
    pub se: SqueezeExcite,
    pub projection: Option<Conv2d>,
}

impl ResidualBlock {
    pub fn new<T: Float>(pb: &mut ParamBuilder<'_, T>, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut lp = pb.pp(&format!("layer{i}"));
            let c_in = if i == 0 { cfg.in_channels } else { cfg.out_channels };
            let bn = BatchNorm2d::new(&mut lp.pp("bn"), c_in, cfg.bn_momentum);
            // the last conv starts small so each block begins near identity
            let gain = if i + 1 == cfg.depth { 0.1 } else { 1.0 };
            let mut cp = lp.pp("conv");
            let conv = match (i, cfg.resolution_change) {
                (0, ResolutionChange::Down2) => Conv2d::new(&mut cp, c_in, cfg.out_channels, 3, 2, 1, true, gain),
                (0, ResolutionChange::Up2) => Conv2d::up2(&mut cp, c_in, cfg.out_channels, gain),
                _ => Conv2d::new(&mut cp, c_in, cfg.out_channels, 3, 1, 1, true, gain),
            };
            layers.push((bn, conv));
        }
        let se = SqueezeExcite::new(&mut pb.pp("se"), cfg.out_channels, cfg.se_reduction);
        let projection = (cfg.in_channels != cfg.out_channels)
            .then(|| Conv2d::new(&mut pb.pp("skip"), cfg.in_channels, cfg.out_channels, 1, 1, 0, false, 0.5));
        Ok(Self { cfg, layers, se, projection })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        assert_eq!(s.graph.shape(x)[1], self.cfg.in_channels, "residual block input channels");
        let mut h = x;
        for (bn, conv) in &self.layers {
            h = bn.forward(s, h);
            h = s.graph.hard_swish(h);
            h = conv.forward(s, h);
        }
        let h = self.se.forward(s, h);
        let skip = self.skip(s, x);
        s.graph.add(h, skip)
    }

    /// The skip path alone: interpolation on resolution change, then projection.
    pub fn skip<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let (_, _, hgt, wid) = s.value(x).dims4();
        let resized = match self.cfg.resolution_change {
            ResolutionChange::None => x,
            ResolutionChange::Down2 => s.graph.resize(x, hgt / 2, wid / 2),
            ResolutionChange::Up2 => s.graph.resize(x, hgt * 2, wid * 2),
        };
        match &self.projection {
            Some(p) => p.forward(s, resized),
            None => resized,
        }
    }
}

/// Re-normalizes each channel of `content` to the given per-sample,
/// per-channel mean and standard deviation (both `(N, C)`).
pub fn adain<T: Float>(s: &mut Session<'_, T>, content: Var, style_mean: Var, style_std: Var) -> Var {
    let normalized = s.graph.instance_norm(content, ADAIN_EPS);
    let scaled = s.graph.mul_sample_channel(normalized, style_std);
    s.graph.add_sample_channel(scaled, style_mean)
}

/// Appends `C - 1` spatially constant planes holding the recentered
/// probabilities of the first `C - 1` classes.
pub fn condition_channels<T: Float>(s: &mut Session<'_, T>, f: Var, cond: &[ConditionVector]) -> Result<Var> {
    let (n, _, h, w) = s.value(f).dims4();
    if cond.len() != n {
        return Err(contract(format!("{} condition vectors for a batch of {n}", cond.len())));
    }
    let c = cond[0].class_count();
    if c < 2 || cond.iter().any(|v| v.class_count() != c) {
        return Err(contract("condition vectors need a common class count of at least 2"));
    }
    let extra = c - 1;
    let mut data = Vec::with_capacity(n * extra * h * w);
    for v in cond {
        for &p in &v.recentered[..extra] {
            data.extend(std::iter::repeat_n(T::of(p), h * w));
        }
    }
    let planes = s.constant(Tensor::from_vec(&[n, extra, h, w], data)?);
    Ok(s.graph.concat_channels(&[f, planes]))
}
