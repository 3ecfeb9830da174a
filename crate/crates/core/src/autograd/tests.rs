//! Central finite-difference checks for every differentiable op.

use super::*;

fn pseudo(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let v = ((i as u64 + 1).wrapping_mul(2654435761).wrapping_add(seed * 97) % 1000) as f64 / 1000.0;
            (v - 0.5) * 2.0 * scale
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Compares backprop gradients of `f` w.r.t. each input against central
/// differences with step `h`.
fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var, tol: f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("gradient present").clone();
        for i in 0..input.numel() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.to_vec();
                perturbed[k].data_mut()[i] += delta;
                let mut g = Graph::new();
                let vs: Vec<Var> = perturbed.into_iter().map(|t| g.param(t)).collect();
                let l = f(&mut g, &vs);
                g.value(l).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(err < tol, "input {k} elem {i}: analytic {a} vs numeric {numeric}");
        }
    }
}

/// Weighted sum to make every output element matter differently.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let w = pseudo(g.shape(v), seed, 1.0);
    let wv = g.constant(w);
    let p = g.mul(v, wv);
    g.sum_all(p)
}

#[test]
fn elementwise_ops() {
    let a = pseudo(&[2, 3], 1, 2.0);
    let b = pseudo(&[2, 3], 2, 1.0).map(|v| v + 3.0);
    check(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let q = g.div(m, v[1]);
        let e = g.exp(q);
        let sq = g.square(e);
        let sc = g.scale(sq, 0.3);
        let sh = g.add_scalar(sc, 1.5);
        weighted_sum(g, sh, 3)
    }, 1e-6);
    check(&[a.map(|v| v * 2.0)], |g, v| {
        let s = g.sigmoid(v[0]);
        let h = g.hard_swish(v[0]);
        let p = g.softplus(v[0]);
        let r = g.relu(v[0]);
        let t = g.add(s, h);
        let t = g.add(t, p);
        let t = g.add(t, r);
        weighted_sum(g, t, 4)
    }, 1e-5);
}

#[test]
fn broadcast_ops() {
    let x = pseudo(&[2, 3, 2, 2], 5, 1.0);
    let c = pseudo(&[3], 6, 1.0);
    let nc = pseudo(&[2, 3], 7, 1.0);
    check(&[x, c, nc], |g, v| {
        let a = g.mul_channel(v[0], v[1]);
        let a = g.add_channel(a, v[1]);
        let a = g.mul_sample_channel(a, v[2]);
        let a = g.add_sample_channel(a, v[2]);
        weighted_sum(g, a, 8)
    }, 1e-6);
}

#[test]
fn convolutions() {
    let x = pseudo(&[2, 3, 5, 5], 9, 1.0);
    let w = pseudo(&[4, 3, 3, 3], 10, 0.5);
    check(&[x.clone(), w], |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1);
        weighted_sum(g, y, 11)
    }, 1e-6);
    let wt = pseudo(&[3, 2, 4, 4], 12, 0.5);
    check(&[x.clone(), wt], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], 2, 1);
        assert_eq!(g.shape(y), &[2, 2, 10, 10]);
        weighted_sum(g, y, 13)
    }, 1e-6);
    let w1 = pseudo(&[2, 3, 1, 1], 14, 0.5);
    check(&[x, w1], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 0);
        weighted_sum(g, y, 15)
    }, 1e-6);
}

#[test]
fn resample_pool_and_shape_ops() {
    let x = pseudo(&[2, 2, 4, 4], 16, 1.0);
    let y = pseudo(&[2, 1, 4, 4], 17, 1.0);
    check(&[x.clone(), y], |g, v| {
        let up = g.resize(v[0], 8, 8);
        let down = g.resize(up, 2, 2);
        let back = g.resize(down, 4, 4);
        let cat = g.concat_channels(&[back, v[1], v[0]]);
        let sl = g.slice_channels(cat, 1, 3);
        let pooled = g.mean_hw(sl);
        let r = g.reshape(pooled, &[2, 3, 1, 1]);
        let s = g.sum_per_sample(r);
        let a = weighted_sum(g, s, 18);
        let b = weighted_sum(g, sl, 19);
        g.add(a, b)
    }, 1e-6);
    let seed = pseudo(&[1, 2, 3, 3], 20, 1.0);
    check(&[seed], |g, v| {
        let e = g.expand_batch(v[0], 3);
        let m = g.mean_all(e);
        let w = weighted_sum(g, e, 21);
        g.add(m, w)
    }, 1e-6);
}

#[test]
fn normalizations() {
    let x = pseudo(&[3, 2, 3, 3], 22, 1.5);
    check(&[x.clone()], |g, v| {
        let (y, _) = g.batch_norm_train(v[0], 1e-5);
        weighted_sum(g, y, 23)
    }, 1e-5);
    check(&[x.clone()], |g, v| {
        let y = g.batch_norm_eval(v[0], &[0.1, -0.2], &[0.5, 2.0], 1e-5);
        weighted_sum(g, y, 24)
    }, 1e-6);
    check(&[x], |g, v| {
        let y = g.instance_norm(v[0], 1e-5);
        weighted_sum(g, y, 25)
    }, 1e-5);
}

#[test]
fn linear_and_cross_entropy() {
    let x = pseudo(&[4, 5], 26, 1.0);
    let w = pseudo(&[3, 5], 27, 1.0);
    check(&[x, w], |g, v| {
        let logits = g.linear(v[0], v[1]);
        g.cross_entropy(logits, &[0, 2, 1, 2])
    }, 1e-6);
}

#[test]
fn fused_kl_and_nll() {
    let mq = pseudo(&[2, 3], 28, 1.0);
    let lq = pseudo(&[2, 3], 29, 0.5);
    let mp = pseudo(&[2, 3], 30, 1.0);
    let lp = pseudo(&[2, 3], 31, 0.5);
    check(&[mq, lq, mp, lp], |g, v| {
        let kl = g.kl_diag(v[0], v[1], v[2], v[3]);
        weighted_sum(g, kl, 32)
    }, 1e-6);
    let recon = pseudo(&[2, 1, 2, 2], 33, 1.0);
    let target = pseudo(&[2, 1, 2, 2], 34, 1.0);
    let var = pseudo(&[1, 2, 2], 35, 0.4).map(|v| v + 0.5);
    check(&[recon], move |g, v| {
        let nll = g.gaussian_nll(v[0], target.clone(), &var);
        weighted_sum(g, nll, 36)
    }, 1e-6);
}

#[test]
fn kl_of_identical_gaussians_is_exactly_zero() {
    for &(m, l) in &[(0.3f64, -1.7f64), (-4.0, 2.5), (0.0, 0.0)] {
        assert_eq!(kl_term(m, l, m, l), 0.0);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[2], 1.0));
    let p = g.param(Tensor::full(&[2], 2.0));
    let m = g.mul(c, p);
    let s = g.sum_all(m);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
}
