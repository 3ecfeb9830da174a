//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the values it produced. [`Graph::backward`] then walks the tape in reverse
//! and returns gradients for every node that depends on a parameter leaf.
//!
//! The op set is deliberately narrow: exactly what the hierarchical VAE and
//! the classifier need, with fused kernels for normalization, Gaussian KL and
//! Gaussian NLL.

mod conv;
mod norm;
mod resample;

use crate::tensor::{gemm, Float, MatRef, Tensor};

use conv::ConvGeom;
use resample::AxisWeights;


/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    /// Operand of shape `(C)` broadcast over `(N, C, ...)`.
    Channel,
    /// Operand of shape `(N, C)` broadcast over `(N, C, H, W)`.
    SampleChannel,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    HardSwish(Var),
    Softplus(Var),
    Square(Var),
    BcastAdd(Var, Var, Bcast),
    BcastMul(Var, Var, Bcast),
    Conv2d { x: Var, w: Var, geom: ConvGeom, c_out: usize },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom, c_in: usize },
    Resample { x: Var, ah: AxisWeights, aw: AxisWeights },
    MeanHw(Var),
    BatchNormTrain { x: Var, inv_std: Vec<T> },
    BatchNormEval { x: Var, inv_std: Vec<T> },
    InstanceNorm { x: Var, stats: norm::InstanceStats<T> },
    Linear { x: Var, w: Var },
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Reshape(Var),
    ExpandBatch(Var),
    SumAll(Var),
    SumPerSample(Var),
    KlDiag { mq: Var, lq: Var, mp: Var, lp: Var },
    GaussianNll { recon: Var, target: Tensor<T>, var: Tensor<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct ObservedStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn plane_of(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients (inputs, noise, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).zip_map(self.value(b), f);
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(a).map(|x| x * f);
        self.push(out, Op::Scale(a, f), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn hard_swish(&mut self, a: Var) -> Var {
        let out = self.value(a).map(hard_swish);
        self.push(out, Op::HardSwish(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    fn bcast_index(shape: &[usize], kind: Bcast) -> impl Fn(usize) -> usize {
        let c = shape[1];
        let plane = plane_of(shape);
        move |i| match kind {
            Bcast::Channel => (i / plane) % c,
            Bcast::SampleChannel => i / plane,
        }
    }

    fn check_bcast(&self, x: Var, b: Var, kind: Bcast) {
        let xs = self.shape(x);
        let bs = self.shape(b);
        let ok = match kind {
            Bcast::Channel => xs.len() >= 2 && bs == [xs[1]],
            Bcast::SampleChannel => xs.len() >= 2 && bs == [xs[0], xs[1]],
        };
        assert!(ok, "cannot broadcast {bs:?} over {xs:?} ({kind:?})");
    }

    fn bcast(&mut self, x: Var, b: Var, kind: Bcast, mul: bool) -> Var {
        self.check_bcast(x, b, kind);
        let idx = Self::bcast_index(self.shape(x), kind);
        let bv = self.value(b).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mul { v * bv[idx(i)] } else { v + bv[idx(i)] })
            .collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("same shape");
        let op = if mul { Op::BcastMul(x, b, kind) } else { Op::BcastAdd(x, b, kind) };
        self.push(out, op, &[x, b])
    }

    /// `x + b[c]` for `b` of shape `(C)`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        self.bcast(x, b, Bcast::Channel, false)
    }

    /// `x * s[c]` for `s` of shape `(C)`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        self.bcast(x, s, Bcast::Channel, true)
    }

    /// `x + b[n, c]` broadcast over spatial positions.
    pub fn add_sample_channel(&mut self, x: Var, b: Var) -> Var {
        self.bcast(x, b, Bcast::SampleChannel, false)
    }

    /// `x * s[n, c]` broadcast over spatial positions.
    pub fn mul_sample_channel(&mut self, x: Var, s: Var) -> Var {
        self.bcast(x, s, Bcast::SampleChannel, true)
    }

    /// Cross-correlation of `x (N, C_in, H, W)` with `w (C_out, C_in, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (c_out, c_in, k, k2) = self.value(w).dims4();
        assert_eq!(c, c_in, "conv2d input channels {c} vs weight {c_in}");
        assert_eq!(k, k2, "square kernels only");
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let data = conv::conv2d_forward(self.value(x).data(), n, &geom, self.value(w).data(), c_out);
        let out = Tensor::from_vec(&[n, c_out, geom.out_h, geom.out_w], data).expect("conv shape");
        self.push(out, Op::Conv2d { x, w, geom, c_out }, &[x, w])
    }

    /// Transposed convolution with weight `(C_in, C_out, k, k)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (c_in, c_out, k, _) = self.value(w).dims4();
        assert_eq!(c, c_in, "conv_transpose2d input channels {c} vs weight {c_in}");
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(c_out, oh, ow, k, stride, pad);
        assert_eq!((geom.out_h, geom.out_w), (h, wd), "inconsistent transposed geometry");
        let data = conv::conv_transpose2d_forward(self.value(x).data(), n, c_in, &geom, self.value(w).data());
        let out = Tensor::from_vec(&[n, c_out, oh, ow], data).expect("convT shape");
        self.push(out, Op::ConvTranspose2d { x, w, geom, c_in }, &[x, w])
    }

    /// Bilinear resize of the spatial dimensions.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        if (h, w) == (out_h, out_w) {
            return x;
        }
        let ah = AxisWeights::bilinear(h, out_h);
        let aw = AxisWeights::bilinear(w, out_w);
        let data = resample::resample_forward(self.value(x).data(), n * c, (h, w), &ah, &aw);
        let out = Tensor::from_vec(&[n, c, out_h, out_w], data).expect("resize shape");
        self.push(out, Op::Resample { x, ah, aw }, &[x])
    }

    /// Global average pooling `(N, C, H, W) -> (N, C)`.
    pub fn mean_hw(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let inv = T::of(1.0 / (h * w) as f64);
        let data = self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[n, c], data).expect("pool shape");
        self.push(out, Op::MeanHw(x), &[x])
    }

    /// Normalizes with batch statistics; returns the statistics for running
    /// averages. No affine transform is applied.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> (Var, ObservedStats<T>) {
        let shape = self.shape(x).to_vec();
        let (n, c, plane) = (shape[0], shape[1], plane_of(&shape));
        let stats = norm::batch_stats(self.value(x).data(), n, c, plane, eps);
        let data = norm::normalize(self.value(x).data(), n, c, plane, &stats.mean, &stats.inv_std);
        let out = Tensor::from_vec(&shape, data).expect("bn shape");
        let observed = ObservedStats { mean: stats.mean, var: stats.var, count: n * plane };
        (self.push(out, Op::BatchNormTrain { x, inv_std: stats.inv_std }, &[x]), observed)
    }

    /// Normalizes with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, mean: &[T], var: &[T], eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, plane) = (shape[0], shape[1], plane_of(&shape));
        assert_eq!(mean.len(), c);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let data = norm::normalize(self.value(x).data(), n, c, plane, mean, &inv_std);
        let out = Tensor::from_vec(&shape, data).expect("bn shape");
        self.push(out, Op::BatchNormEval { x, inv_std }, &[x])
    }

    /// Per-sample, per-channel spatial normalization `(x - mean) / (std + eps)`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let (planes, plane) = (shape[0] * shape[1], plane_of(&shape));
        let xv = self.value(x).data();
        let stats = norm::instance_stats(xv, planes, plane, eps);
        let mut data = Vec::with_capacity(xv.len());
        for (p, chunk) in xv.chunks(plane).enumerate() {
            let (mu, sigma) = (stats.mean[p], stats.sigma[p]);
            data.extend(chunk.iter().map(|&v| (v - mu) / sigma));
        }
        let out = Tensor::from_vec(&shape, data).expect("in shape");
        self.push(out, Op::InstanceNorm { x, stats }, &[x])
    }

    /// `x (N, in) * w (out, in)^T`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (n, d_in) = self.value(x).dims2();
        let (d_out, d_in2) = self.value(w).dims2();
        assert_eq!(d_in, d_in2, "linear input dim {d_in} vs weight {d_in2}");
        let mut data = vec![T::zero(); n * d_out];
        gemm(
            MatRef::new(self.value(x).data(), n, d_in),
            MatRef::new(self.value(w).data(), d_out, d_in).t(),
            T::zero(),
            &mut data,
        );
        let out = Tensor::from_vec(&[n, d_out], data).expect("linear shape");
        self.push(out, Op::Linear { x, w }, &[x, w])
    }

    /// Concatenates along dimension 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let plane = plane_of(&first);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s[0] == n && plane_of(s) == plane && s[2..] == first[2..], "concat mismatch {s:?} vs {first:?}");
            c_total += s[1];
        }
        let mut data = Vec::with_capacity(n * c_total * plane);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let per = v.shape()[1] * plane;
                data.extend_from_slice(&v.data()[b * per..(b + 1) * per]);
            }
        }
        let mut shape = first;
        shape[1] = c_total;
        let out = Tensor::from_vec(&shape, data).expect("concat shape");
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start .. start + len` along dimension 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, plane) = (shape[0], shape[1], plane_of(&shape));
        assert!(start + len <= c, "slice {start}+{len} exceeds {c} channels");
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            data.extend_from_slice(&xv[(b * c + start) * plane..(b * c + start + len) * plane]);
        }
        let mut out_shape = shape;
        out_shape[1] = len;
        let out = Tensor::from_vec(&out_shape, data).expect("slice shape");
        self.push(out, Op::SliceChannels { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Repeats a `(1, ...)` tensor `n` times along the batch dimension.
    pub fn expand_batch(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.shape()[0], 1, "expand_batch needs a leading 1");
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        let data = v.data().repeat(n);
        let out = Tensor::from_vec(&shape, data).expect("expand shape");
        self.push(out, Op::ExpandBatch(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// `(N, ...) -> (N)`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.shape()[0];
        let data = v.data().chunks(v.numel() / n).map(|c| c.iter().copied().sum()).collect();
        let out = Tensor::from_vec(&[n], data).expect("sum shape");
        self.push(out, Op::SumPerSample(x), &[x])
    }

    /// Per-sample `KL(q || p)` between diagonal Gaussians given as means and
    /// log standard deviations; output shape `(N)`.
    pub fn kl_diag(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let shape = self.shape(mq).to_vec();
        for v in [lq, mp, lp] {
            assert_eq!(self.shape(v), &shape[..], "kl_diag shape mismatch");
        }
        let n = shape[0];
        let per = self.value(mq).numel() / n;
        let (a, b, c, d) = (self.value(mq).data(), self.value(lq).data(), self.value(mp).data(), self.value(lp).data());
        let data = (0..n)
            .map(|s| (s * per..(s + 1) * per).map(|i| kl_term(a[i], b[i], c[i], d[i])).sum())
            .collect();
        let out = Tensor::from_vec(&[n], data).expect("kl shape");
        self.push(out, Op::KlDiag { mq, lq, mp, lp }, &[mq, lq, mp, lp])
    }

    /// Per-sample Gaussian negative log-likelihood of `target` under mean
    /// `recon` and fixed per-element variance `var`; output shape `(N)`.
    pub fn gaussian_nll(&mut self, recon: Var, target: Tensor<T>, var: &Tensor<T>) -> Var {
        let rv = self.value(recon);
        assert_eq!(rv.shape(), target.shape(), "nll shape mismatch");
        let n = rv.shape()[0];
        let per = rv.numel() / n;
        assert_eq!(var.numel(), per, "variance must match one sample");
        let half_log_2pi = T::of(0.5 * (2.0 * std::f64::consts::PI).ln());
        let half = T::of(0.5);
        let (r, x, v) = (rv.data(), target.data(), var.data());
        let data = (0..n)
            .map(|s| {
                (0..per)
                    .map(|i| {
                        let d = x[s * per + i] - r[s * per + i];
                        d * d / (T::of(2.0) * v[i]) + half * v[i].ln() + half_log_2pi
                    })
                    .sum()
            })
            .collect();
        let out = Tensor::from_vec(&[n], data).expect("nll shape");
        self.push(out, Op::GaussianNll { recon, target, var: var.clone() }, &[recon])
    }

    /// Mean softmax cross-entropy of `logits (N, C)` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, c) = self.value(logits).dims2();
        assert_eq!(labels.len(), n);
        let probs = softmax_rows(self.value(logits).data(), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * c + l].max(T::min_positive_value()).ln())
            .sum::<T>()
            / T::of(n as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        acc(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    acc(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if self.wants(*b) {
                    let t = g.zip_map(out, |x, o| x * o).zip_map(bv, |x, y| -x / y);
                    acc(grads, *b, t);
                }
            }
            Op::Scale(a, f) => acc(grads, *a, g.map(|x| x * *f)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Exp(a) => acc(grads, *a, g.zip_map(out, |x, o| x * o)),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(out, |x, o| x * o * (T::one() - o))),
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |x, v| if v > T::zero() { x } else { T::zero() }),
            ),
            Op::HardSwish(a) => acc(grads, *a, g.zip_map(self.value(*a), |x, v| x * hard_swish_grad(v))),
            Op::Softplus(a) => acc(grads, *a, g.zip_map(self.value(*a), |x, v| x * sigmoid(v))),
            Op::Square(a) => acc(grads, *a, g.zip_map(self.value(*a), |x, v| x * T::of(2.0) * v)),
            Op::BcastAdd(x, b, kind) => {
                if self.wants(*x) {
                    acc(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let idxf = Self::bcast_index(g.shape(), *kind);
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let d = gb.data_mut();
                    for (i, &v) in g.data().iter().enumerate() {
                        d[idxf(i)] = d[idxf(i)] + v;
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::BcastMul(x, s, kind) => {
                let idxf = Self::bcast_index(g.shape(), *kind);
                let sv = self.value(*s).data();
                if self.wants(*x) {
                    let data = g.data().iter().enumerate().map(|(i, &v)| v * sv[idxf(i)]).collect();
                    acc(grads, *x, Tensor::from_vec(g.shape(), data).expect("shape"));
                }
                if self.wants(*s) {
                    let xv = self.value(*x).data();
                    let mut gs = Tensor::zeros(self.shape(*s));
                    let d = gs.data_mut();
                    for (i, &v) in g.data().iter().enumerate() {
                        d[idxf(i)] = d[idxf(i)] + v * xv[i];
                    }
                    acc(grads, *s, gs);
                }
            }
            Op::Conv2d { x, w, geom, c_out } => {
                let n = self.shape(*x)[0];
                let (gx, gw) = conv::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    *c_out,
                    g.data(),
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(gx) = gx {
                    acc(grads, *x, Tensor::from_vec(self.shape(*x), gx).expect("shape"));
                }
                if let Some(gw) = gw {
                    acc(grads, *w, Tensor::from_vec(self.shape(*w), gw).expect("shape"));
                }
            }
            Op::ConvTranspose2d { x, w, geom, c_in } => {
                let n = self.shape(*x)[0];
                let (gx, gw) = conv::conv_transpose2d_backward(
                    self.value(*x).data(),
                    n,
                    *c_in,
                    geom,
                    self.value(*w).data(),
                    g.data(),
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(gx) = gx {
                    acc(grads, *x, Tensor::from_vec(self.shape(*x), gx).expect("shape"));
                }
                if let Some(gw) = gw {
                    acc(grads, *w, Tensor::from_vec(self.shape(*w), gw).expect("shape"));
                }
            }
            Op::Resample { x, ah, aw } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let gx = resample::resample_backward(g.data(), n * c, (h, w), ah, aw);
                acc(grads, *x, Tensor::from_vec(self.shape(*x), gx).expect("shape"));
            }
            Op::MeanHw(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let inv = T::of(1.0 / (h * w) as f64);
                let mut gx = Vec::with_capacity(self.value(*x).numel());
                for &v in g.data() {
                    gx.extend(std::iter::repeat_n(v * inv, h * w));
                }
                acc(grads, *x, Tensor::from_vec(self.shape(*x), gx).expect("shape"));
            }
            Op::BatchNormTrain { x, inv_std } => {
                let s = self.shape(*x);
                let gx = norm::batch_norm_backward(g.data(), out.data(), s[0], s[1], plane_of(s), inv_std);
                acc(grads, *x, Tensor::from_vec(s, gx).expect("shape"));
            }
            Op::BatchNormEval { x, inv_std } => {
                let s = self.shape(*x);
                let idxf = Self::bcast_index(s, Bcast::Channel);
                let data = g.data().iter().enumerate().map(|(i, &v)| v * inv_std[idxf(i)]).collect();
                acc(grads, *x, Tensor::from_vec(s, data).expect("shape"));
            }
            Op::InstanceNorm { x, stats } => {
                let s = self.shape(*x);
                let gx = norm::instance_norm_backward(g.data(), self.value(*x).data(), plane_of(s), stats);
                acc(grads, *x, Tensor::from_vec(s, gx).expect("shape"));
            }
            Op::Linear { x, w } => {
                let (n, d_in) = self.value(*x).dims2();
                let d_out = self.shape(*w)[0];
                let gm = MatRef::new(g.data(), n, d_out);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); n * d_in];
                    gemm(gm, MatRef::new(self.value(*w).data(), d_out, d_in), T::zero(), &mut gx);
                    acc(grads, *x, Tensor::from_vec(&[n, d_in], gx).expect("shape"));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); d_out * d_in];
                    gemm(gm.t(), MatRef::new(self.value(*x).data(), n, d_in), T::zero(), &mut gw);
                    acc(grads, *w, Tensor::from_vec(&[d_out, d_in], gw).expect("shape"));
                }
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let plane = plane_of(g.shape());
                let c_total = g.shape()[1];
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let off = (b * c_total + start) * plane;
                            data.extend_from_slice(&g.data()[off..off + c * plane]);
                        }
                        acc(grads, p, Tensor::from_vec(self.shape(p), data).expect("shape"));
                    }
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let s = self.shape(*x);
                let (n, c, plane) = (s[0], s[1], plane_of(s));
                let len = g.shape()[1];
                let mut gx = Tensor::zeros(s);
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    gx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                }
                acc(grads, *x, gx);
            }
            Op::Reshape(x) => {
                acc(grads, *x, g.clone().reshape(self.shape(*x)).expect("shape"));
            }
            Op::ExpandBatch(x) => {
                let per = self.value(*x).numel();
                let mut gx = vec![T::zero(); per];
                for chunk in g.data().chunks(per) {
                    for (d, &v) in gx.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                acc(grads, *x, Tensor::from_vec(self.shape(*x), gx).expect("shape"));
            }
            Op::SumAll(x) => {
                acc(grads, *x, Tensor::full(self.shape(*x), g.data()[0]));
            }
            Op::SumPerSample(x) => {
                let per = self.value(*x).numel() / g.numel();
                let mut gx = Vec::with_capacity(self.value(*x).numel());
                for &v in g.data() {
                    gx.extend(std::iter::repeat_n(v, per));
                }
                acc(grads, *x, Tensor::from_vec(self.shape(*x), gx).expect("shape"));
            }
            Op::KlDiag { mq, lq, mp, lp } => {
                let shape = self.shape(*mq);
                let per = self.value(*mq).numel() / g.numel();
                let (a, b, c, d) =
                    (self.value(*mq).data(), self.value(*lq).data(), self.value(*mp).data(), self.value(*lp).data());
                let len = a.len();
                let (mut gmq, mut glq, mut gmp, mut glp) =
                    (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
                for i in 0..len {
                    let go = g.data()[i / per];
                    let (dm, dl_q, dl_p) = kl_term_grad(a[i], b[i], c[i], d[i]);
                    gmq[i] = go * dm;
                    gmp[i] = -go * dm;
                    glq[i] = go * dl_q;
                    glp[i] = go * dl_p;
                }
                for (v, gv) in [(*mq, gmq), (*lq, glq), (*mp, gmp), (*lp, glp)] {
                    if self.wants(v) {
                        acc(grads, v, Tensor::from_vec(shape, gv).expect("shape"));
                    }
                }
            }
            Op::GaussianNll { recon, target, var } => {
                let rv = self.value(*recon);
                let per = rv.numel() / g.numel();
                let data = rv
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (&r, &x))| g.data()[i / per] * (r - x) / var.data()[i % per])
                    .collect();
                acc(grads, *recon, Tensor::from_vec(rv.shape(), data).expect("shape"));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, c) = self.value(*logits).dims2();
                let scale = g.data()[0] / T::of(n as f64);
                let mut gl = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] = gl[i * c + l] - T::one();
                }
                for v in gl.iter_mut() {
                    *v = *v * scale;
                }
                acc(grads, *logits, Tensor::from_vec(&[n, c], gl).expect("shape"));
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e = *e + *x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn hard_swish<T: Float>(x: T) -> T {
    let six = T::of(6.0);
    x * (x + T::of(3.0)).max(T::zero()).min(six) / six
}

fn hard_swish_grad<T: Float>(x: T) -> T {
    let three = T::of(3.0);
    if x < -three {
        T::zero()
    } else if x > three {
        T::one()
    } else {
        (T::of(2.0) * x + three) / T::of(6.0)
    }
}

/// One element of `KL(N(mq, e^lq) || N(mp, e^lp))`.
///
/// Written as a variance ratio so that identical arguments give exactly 0.
pub fn kl_term<T: Float>(mq: T, lq: T, mp: T, lp: T) -> T {
    let two = T::of(2.0);
    let half = T::of(0.5);
    let vq = (two * lq).exp();
    let vp = (two * lp).exp();
    let d = mq - mp;
    (lp - lq) + half * ((vq + d * d) / vp) - half
}

/// Partial derivatives of [`kl_term`] w.r.t. `(mq, lq, lp)`; `d/dmp = -d/dmq`.
fn kl_term_grad<T: Float>(mq: T, lq: T, mp: T, lp: T) -> (T, T, T) {
    let two = T::of(2.0);
    let vq = (two * lq).exp();
    let vp = (two * lp).exp();
    let d = mq - mp;
    (d / vp, vq / vp - T::one(), T::one() - (vq + d * d) / vp)
}

pub fn softmax_rows<T: Float>(logits: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

#[cfg(test)]
mod tests;
