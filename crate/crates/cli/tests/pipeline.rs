//! Drives the `vaex` binary through the whole pipeline at 8×8 scale.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = "\
# tiny end-to-end smoke configuration
model.preset = tiny
dataset.n = 48
dataset.image_size = 8
dataset.seed = 3
classifier.epochs = 2
classifier.batch_size = 16
train.epochs = 1
train.batch_size = 8
";

fn vaex(args: &[&str], data: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaex"))
        .args(args)
        .env("VAEX_DATA_DIR", data)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn vaex")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn runs(data: &Path, command: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(data.join("runs"))
        .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    // names are <stamp>-<command>-<hash12>
    v.retain(|p| {
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        name.len() > 13 && name[..name.len() - 13].ends_with(&format!("-{command}"))
    });
    v.sort();
    v
}

fn manifest(run: &Path) -> String {
    fs::read_to_string(run.join("manifest.txt")).unwrap()
}

fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let cfg = dir.join("tiny.conf");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    (data, cfg)
}

#[test]
fn full_pipeline_at_tiny_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&vaex(&["dataset", "--config", c, "--out", data.to_str().unwrap()], &data));
    for f in ["labels.tsv", "manifest.tsv", "split.tsv", "images/s0000.png"] {
        assert!(data.join(f).exists(), "{f}");
    }
    ok(&vaex(&["train-classifier", "--config", c], &data));
    ok(&vaex(&["cache-probs", "--config", c], &data));
    ok(&vaex(&["train", "--config", c], &data));
    for f in ["classifier.ckpt", "probs.tsv", "vaex.ckpt"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let train_run = &runs(&data, "train")[0];
    let log = fs::read_to_string(train_run.join("metrics.tsv")).unwrap();
    assert!(log.starts_with("step\tepoch\tnll\tkl_raw\tkl_fb\ttotal\tlr\n"));
    assert!(log.lines().count() > 2);
    assert_eq!(fs::read_to_string(train_run.join("config.txt")).unwrap(), TINY_CONFIG);

    let out = vaex(&["eval", "--config", c, "--fid-max", "64"], &data);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for key in ["mse\t", "bits_per_dim\t", "success.r0\t", "fid.reconstruction\t", "fid.counterfactual_r0\t", "fid.baseline_split\t"] {
        assert!(stdout.contains(key), "missing {key} in\n{stdout}");
    }

    let grid = tmp.path().join("grid");
    let out = vaex(
        &["counterfactual", "--config", c, "--id", "s0042", "--target", "1", "--r", "0,0.2,0.4,0.6,0.8,1", "--grid", grid.to_str().unwrap()],
        &data,
    );
    ok(&out);
    let png = image::open(grid.join("s0042_sweep.png")).unwrap();
    // 7 tiles of 8 px with 2 px borders
    assert_eq!((png.width(), png.height()), (7 * 8 + 8 * 2, 8 + 2 * 2));
    let table = fs::read_to_string(grid.join("sweep.tsv")).unwrap();
    assert!(table.starts_with("r\tsuccess_percent\tn\n"));
    assert_eq!(table.lines().count(), 7);

    for command in ["dataset", "train-classifier", "cache-probs", "train", "eval", "counterfactual"] {
        let r = runs(&data, command);
        assert_eq!(r.len(), 1, "{command}");
        let m = manifest(&r[0]);
        assert!(m.contains("config_hash = "), "{command}: {m}");
        assert!(m.contains("seed."), "{command}: {m}");
    }
}

#[test]
fn reruns_reproduce_dataset_and_cache_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(tmp.path());
    let c = cfg.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&vaex(&["dataset", "--config", c, "--out", d.to_str().unwrap()], d));
        ok(&vaex(&["train-classifier", "--config", c], d));
        ok(&vaex(&["cache-probs", "--config", c], d));
    }
    for f in ["labels.tsv", "manifest.tsv", "split.tsv", "images/s0017.png", "probs.tsv", "classifier.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("empty");
    let out = vaex(&["dataset", "--no-such-flag"], &data);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = vaex(&["eval", "--metric", "fid"], &data);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vaex.ckpt"));

    let out = vaex(&["train"], &data);
    assert_eq!(out.status.code(), Some(3));
    let out = vaex(&["train-classifier"], &data);
    assert_eq!(out.status.code(), Some(3));
    let out = vaex(&["dataset", "--config", "/definitely/not/here.conf"], &data);
    assert_eq!(out.status.code(), Some(3));
    let out = vaex(&["dataset", "--split", "0.5,0.5"], &data);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(tmp.path());
    ok(&vaex(&["dataset", "--config", cfg.to_str().unwrap(), "--n", "10", "--out", data.to_str().unwrap()], &data));
    let labels = fs::read_to_string(data.join("labels.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 11);
    let m = manifest(&runs(&data, "dataset")[0]);
    assert!(m.contains("seed.dataset = 3"), "{m}");
}
