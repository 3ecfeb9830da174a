use proptest::prelude::*;

use vaex_core::model::{recenter_vector, relaxation_factor, NoiseSource, SeededNoise};
use vaex_core::stochastic::{frechet_distance, kl_diag_gaussian, recenter_probability, reparam_sample, smoothed_free_bits, FeatureStats};
use vaex_core::{ConditionVector, DiagGaussian, Tensor};

fn gaussian(mean: Vec<f64>, log_std: Vec<f64>) -> DiagGaussian<f64> {
    let n = mean.len();
    DiagGaussian::new(Tensor::from_vec(&[n], mean).unwrap(), Tensor::from_vec(&[n], log_std).unwrap()).unwrap()
}

fn pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = |lo: f64, hi: f64| prop::collection::vec(lo..hi, n);
    (v(-3.0, 3.0), v(-2.0, 2.0), v(-3.0, 3.0), v(-2.0, 2.0))
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_identity((m1, s1, m2, s2) in pair(5)) {
        let q = gaussian(m1.clone(), s1.clone());
        let p = gaussian(m2, s2);
        prop_assert!(kl_diag_gaussian(&q, &p).unwrap() >= 0.0);
        prop_assert_eq!(kl_diag_gaussian(&q, &q.clone()).unwrap(), 0.0);
    }

    #[test]
    fn recentering_is_monotone_and_symmetric(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 0u32..5) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (flo, fhi) = (recenter_probability(lo, t).unwrap(), recenter_probability(hi, t).unwrap());
        prop_assert!(flo <= fhi + 1e-15);
        prop_assert!((0.0..=1.0).contains(&flo));
        // symmetric about one half
        let mirrored = recenter_probability(1.0 - a, t).unwrap();
        prop_assert!((recenter_probability(a, t).unwrap() + mirrored - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recentered_vectors_sum_to_one(raw in prop::collection::vec(0.01f64..1.0, 2..5)) {
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let xi = recenter_vector(&p, 3).unwrap();
        prop_assert!((xi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let c = ConditionVector::from_raw(p.clone()).unwrap();
        prop_assert_eq!(c.argmax(), vaex_core::model::argmax(&p));
    }

    #[test]
    fn free_bits_bounds(kl in 0.0f64..100.0, fb in 0.0f64..10.0) {
        let v = smoothed_free_bits(kl, fb);
        prop_assert!(v >= kl.max(fb) - 1e-12);
        prop_assert!(v <= kl.max(fb) + std::f64::consts::LN_2 + 1e-12);
    }

    #[test]
    fn relaxation_factor_is_monotone_in_r_and_k(r1 in 0.0f64..=1.0, r2 in 0.0f64..=1.0, k in 0usize..6) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        prop_assert!(relaxation_factor(lo, k) <= relaxation_factor(hi, k));
        prop_assert!(relaxation_factor(r1, k + 1) <= relaxation_factor(r1, k));
        prop_assert_eq!(relaxation_factor(r1, 0), 1.0);
        prop_assert_eq!(relaxation_factor(1.0, k), 1.0);
    }

    #[test]
    fn temperature_scales_the_spread(seed in any::<u64>(), t in 0.05f64..2.0, mean in -2.0f64..2.0) {
        let d = gaussian(vec![mean; 4], vec![0.3; 4]);
        let eps = SeededNoise::batch(seed, 1).standard_normal(&[1, 4]).reshape(&[4]).unwrap();
        let z = reparam_sample(&d, &eps, t).unwrap();
        for (zi, ei) in z.data().iter().zip(eps.data()) {
            prop_assert!((zi - (mean + t * 0.3f64.exp() * ei)).abs() < 1e-12);
        }
    }

    #[test]
    fn frechet_distance_is_a_symmetric_nonnegative_score(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6..12),
        b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 6..12),
    ) {
        let (fa, fb) = (FeatureStats::fit(&a).unwrap(), FeatureStats::fit(&b).unwrap());
        let ab = frechet_distance(&fa, &fb).unwrap();
        let ba = frechet_distance(&fb, &fa).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() < 1e-6 * ab.abs().max(1.0));
        prop_assert!(frechet_distance(&fa, &fa).unwrap().abs() < 1e-6);
    }
}

#[test]
fn sample_temperature_matches_empirical_std() {
    let d = gaussian(vec![0.0; 20_000], vec![0.0; 20_000]);
    let eps = SeededNoise::batch(17, 1).standard_normal(&[1, 20_000]).reshape(&[20_000]).unwrap();
    for t in [1.0, 1.0 / 3.0] {
        let z = reparam_sample(&d, &eps, t).unwrap();
        let n = z.data().len() as f64;
        let m = z.data().iter().sum::<f64>() / n;
        let sd = (z.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - t).abs() < 0.03 * t, "t={t}: sd {sd}");
    }
}
