use vaex_core::data::{generate_synthetic_dataset, load_dataset, AttributeSpec, ImageSet};
use vaex_core::model::{DecodeOptions, NoiseSource, SeededNoise, ZeroNoise};
use vaex_core::nn::{Mode, Session};
use vaex_core::probcache::{ProbCache, ProbCacheEntry};
use vaex_core::stochastic::smoothed_free_bits;
use vaex_core::train::{elbo_loss, evaluate, loss_breakdown, train, Adam, TrainConfig, TsvLogger, METRIC_LOG_HEADER};
use vaex_core::{ConditionVector, ModelConfig, VaexSnapshot};

fn corpus(n: usize) -> (ImageSet, ProbCache) {
    let dir = tempfile::tempdir().unwrap();
    let spec = AttributeSpec { image_size: 8, ..AttributeSpec::default() };
    generate_synthetic_dataset(n, 11, &spec, dir.path()).unwrap();
    let (set, _) = load_dataset(dir.path(), 8).unwrap();
    // a soft stand-in for classifier output
    let entries = set
        .ids
        .iter()
        .zip(&set.labels)
        .enumerate()
        .map(|(i, (id, &l))| {
            let p = 0.7 + 0.25 * ((i * 37 % 11) as f64 / 10.0);
            let raw = if l == 0 { [p, 1.0 - p] } else { [1.0 - p, p] };
            ProbCacheEntry::from_raw(id, &raw).unwrap()
        })
        .collect();
    (set, ProbCache::new(2, entries).unwrap())
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 16, epochs, seed: 4, ..TrainConfig::default() }
}

#[test]
fn graph_and_materialized_losses_agree() {
    let (set, cache) = corpus(6);
    let snap = VaexSnapshot::<f64>::init(ModelConfig::tiny(), 2).unwrap();
    let x = set.gather(&[0, 1, 2, 3]).cast::<f64>();
    let cond: Vec<ConditionVector> = set.ids[..4].iter().map(|id| cache.get(id).unwrap().condition().unwrap()).collect();
    for r in [1.0, 0.5, 0.0] {
        let opts = DecodeOptions::relaxed(r, 1.0);
        let tr = snap.model.trace(&snap.params, Some(&x), &cond, opts, &mut ZeroNoise).unwrap();
        let a = loss_breakdown(&tr, &x, &snap.pixel_variance, 2.0).unwrap();
        let mut s = Session::new(&snap.params, Mode::Eval);
        let xv = s.constant(x.clone());
        let gt = snap.model.forward(&mut s, Some(xv), &cond, opts, &mut ZeroNoise).unwrap();
        let (_, b) = elbo_loss(&mut s, &gt, &x, &snap.pixel_variance, 2.0).unwrap();
        assert!((a.total - b.total).abs() < 1e-9 * a.total.abs().max(1.0), "r={r}: {a:?} vs {b:?}");
        assert!((a.nll - b.nll).abs() < 1e-9 * a.nll.abs().max(1.0));
        if r == 0.0 {
            // layers below the top carry zero KL, so each costs softplus(-fb) + fb
            let floor = (1.0 + (-2.0f64).exp()).ln() + 2.0;
            for &kl in &a.kl_per_layer[1..] {
                assert_eq!(kl, 0.0);
            }
            let expected = smoothed_free_bits(a.kl_per_layer[0], 2.0) + floor * (a.kl_per_layer.len() - 1) as f64;
            assert!((a.kl_total_freebitted - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn learning_rate_decays_per_epoch() {
    let c = TrainConfig { learning_rate: 1e-3, decay: 0.5, ..TrainConfig::default() };
    assert_eq!(c.lr_at(0), 1e-3);
    assert_eq!(c.lr_at(1), 5e-4);
    assert_eq!(c.lr_at(3), 1.25e-4);
    let (set, cache) = corpus(40);
    let mut snap = VaexSnapshot::<f32>::init(ModelConfig::tiny(), 0).unwrap();
    let recs = train(&mut snap, &set, &cache, &TrainConfig { decay: 0.5, ..cfg(2) }, &mut ()).unwrap();
    for r in &recs {
        assert_eq!(r.lr, 1e-3 * 0.5f64.powi(r.epoch as i32));
    }
}

#[test]
fn adam_first_step_moves_each_weight_by_lr() {
    let mut store = vaex_core::nn::ParamStore::<f64>::new();
    let id = store.add("w", vaex_core::Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let mut adam = Adam::new(0.1);
    let g = vaex_core::Tensor::from_vec(&[3], vec![4.0, -0.001, 0.0]).unwrap();
    adam.step(&mut store, &[(id, g)]);
    let w = store.get(id).data().to_vec();
    // bias-corrected m/sqrt(v) is sign(g) on step one
    assert!((w[0] - 0.9).abs() < 1e-9);
    assert!((w[1] - -1.9).abs() < 1e-6);
    assert_eq!(w[2], 0.5);
}

#[test]
fn training_log_is_reproducible() {
    let (set, cache) = corpus(64);
    let run = || {
        let mut snap = VaexSnapshot::<f32>::init(ModelConfig::tiny(), 9).unwrap();
        let mut log = TsvLogger::new(Vec::new()).unwrap();
        let recs = train(&mut snap, &set, &cache, &cfg(2), &mut log).unwrap();
        (recs, String::from_utf8(log.into_inner()).unwrap(), snap)
    };
    let (a, log_a, snap_a) = run();
    let (b, log_b, snap_b) = run();
    assert_eq!(a.len(), 8);
    for (x, y) in a.iter().zip(&b) {
        assert!((x.loss.total - y.loss.total).abs() <= 1e-5 * x.loss.total.abs().max(1.0));
    }
    assert_eq!(log_a, log_b);
    assert!(log_a.starts_with(METRIC_LOG_HEADER));
    assert_eq!(log_a.lines().count(), 9);
    assert_eq!(snap_a.to_checkpoint().to_bytes(), snap_b.to_checkpoint().to_bytes());
    assert_eq!(snap_a.meta.get("epoch"), Some("2"));
}

#[test]
fn training_reduces_the_loss() {
    let (set, cache) = corpus(64);
    let mut snap = VaexSnapshot::<f32>::init(ModelConfig::tiny(), 3).unwrap();
    let before = evaluate(&snap, &set, &cache, 32).unwrap();
    train(&mut snap, &set, &cache, &TrainConfig { learning_rate: 3e-3, ..cfg(6) }, &mut ()).unwrap();
    let after = evaluate(&snap, &set, &cache, 32).unwrap();
    assert!(after.mse < before.mse, "{before:?} -> {after:?}");
    assert!(after.bits_per_dim < before.bits_per_dim);
}

#[test]
fn checkpoint_round_trip_keeps_metrics() {
    let (set, cache) = corpus(32);
    let mut snap = VaexSnapshot::<f32>::init(ModelConfig::tiny(), 5).unwrap();
    train(&mut snap, &set, &cache, &cfg(1), &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    snap.save(&path).unwrap();
    let back = VaexSnapshot::<f32>::load(&path).unwrap();
    let a = evaluate(&snap, &set, &cache, 8).unwrap();
    let b = evaluate(&back, &set, &cache, 8).unwrap();
    for (x, y) in [(a.mse, b.mse), (a.nll, b.nll), (a.kl, b.kl), (a.bits_per_dim, b.bits_per_dim)] {
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-12), "{a:?} vs {b:?}");
    }
}

#[test]
fn evaluation_ignores_batch_size_and_validates_inputs() {
    let (set, cache) = corpus(10);
    let snap = VaexSnapshot::<f32>::init(ModelConfig::tiny(), 1).unwrap();
    let a = evaluate(&snap, &set, &cache, 3).unwrap();
    let b = evaluate(&snap, &set, &cache, 10).unwrap();
    assert_eq!(a.n, 10);
    assert!((a.mse - b.mse).abs() < 1e-6 * a.mse);
    assert!(a.mse > 0.0 && a.kl >= 0.0);

    let empty = ProbCache::new(2, vec![]).unwrap();
    assert!(evaluate(&snap, &set, &empty, 4).is_err());
    let bad = TrainConfig { batch_size: 1, ..TrainConfig::default() };
    let mut snap = snap;
    assert!(train(&mut snap, &set, &cache, &bad, &mut ()).is_err());
}

#[test]
fn training_noise_depends_on_the_seed() {
    let (set, cache) = corpus(32);
    let run = |seed| {
        let mut snap = VaexSnapshot::<f32>::init(ModelConfig::tiny(), 9).unwrap();
        train(&mut snap, &set, &cache, &TrainConfig { seed, ..cfg(1) }, &mut ()).unwrap()
    };
    assert_ne!(run(1)[0].loss.total, run(2)[0].loss.total);
    // the noise source itself is per-sample and batch-order free
    let a: vaex_core::Tensor<f64> = SeededNoise::per_sample(&[5, 6]).standard_normal(&[2, 3]);
    let b: vaex_core::Tensor<f64> = SeededNoise::per_sample(&[6]).standard_normal(&[1, 3]);
    assert_eq!(&a.data()[3..], b.data());
}
