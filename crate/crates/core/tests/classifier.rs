use vaex_core::classifier::{build_prob_cache, train_classifier, ClassifierConfig, ClassifierSnapshot, ClassifierTrainConfig};
use vaex_core::data::{generate_synthetic_dataset, load_dataset, AttributeSpec, ImageSet};

fn sprites(n: usize, seed: u64) -> ImageSet {
    let dir = tempfile::tempdir().unwrap();
    let spec = AttributeSpec { image_size: 8, ..AttributeSpec::default() };
    generate_synthetic_dataset(n, seed, &spec, dir.path()).unwrap();
    load_dataset(dir.path(), 8).unwrap().0
}

fn small() -> ClassifierConfig {
    ClassifierConfig { image_size: 8, widths: vec![8, 8, 16, 16], ..ClassifierConfig::default() }
}

#[test]
fn batched_prediction_matches_single_samples() {
    let set = sprites(9, 1);
    let cls = ClassifierSnapshot::init(small(), 3).unwrap();
    let batched = cls.predict_set(&set, 4).unwrap();
    for i in 0..set.len() {
        let one = cls.predict_probs(&set.gather(&[i])).unwrap();
        for (a, b) in one[0].iter().zip(&batched[i]) {
            assert!((a - b).abs() < 1e-6, "sample {i}");
        }
        assert!((batched[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let feats = cls.features_of(&set.images, 4).unwrap();
    assert_eq!(feats.len(), 9);
    assert_eq!(feats[0].len(), small().feature_dim());
}

#[test]
fn learns_the_synthetic_attribute() {
    let train = sprites(256, 2);
    let val = sprites(64, 3);
    let tcfg = ClassifierTrainConfig { epochs: 6, batch_size: 32, ..ClassifierTrainConfig::default() };
    let (snap, report) = train_classifier(&train, &val, small(), &tcfg).unwrap();
    assert!(!report.degenerate);
    assert_eq!(report.epoch_loss.len(), 6);
    assert!(report.epoch_loss[5] < report.epoch_loss[0]);
    assert!(report.val_accuracy >= 0.9, "{report:?}");
    assert_eq!(snap.accuracy(), Some((report.val_accuracy * 1e6).round() / 1e6));
}

#[test]
fn snapshot_round_trip_preserves_predictions() {
    let set = sprites(6, 4);
    let cls = ClassifierSnapshot::init(small(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    cls.save(&path).unwrap();
    let back = ClassifierSnapshot::load(&path).unwrap();
    assert_eq!(back.config(), cls.config());
    assert_eq!(back.predict_set(&set, 8).unwrap(), cls.predict_set(&set, 8).unwrap());
}

#[test]
fn prob_cache_is_byte_identical_across_runs() {
    let set = sprites(20, 6);
    let text = || {
        let cls = ClassifierSnapshot::init(small(), 7).unwrap();
        build_prob_cache(&cls, &set, 8).unwrap().to_text()
    };
    let a = text();
    assert_eq!(a, text());
    assert_eq!(a.lines().count(), 21);
}

#[test]
fn single_class_training_is_flagged() {
    let mut train = sprites(16, 8);
    train.labels.iter_mut().for_each(|l| *l = 1);
    let val = sprites(4, 9);
    let tcfg = ClassifierTrainConfig { epochs: 1, batch_size: 8, ..ClassifierTrainConfig::default() };
    let (_, report) = train_classifier(&train, &val, small(), &tcfg).unwrap();
    assert!(report.degenerate);
    let mut bad = train.clone();
    bad.labels[0] = 5;
    assert!(train_classifier(&bad, &val, small(), &tcfg).is_err());
}
