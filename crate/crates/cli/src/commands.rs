use std::fs;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use log::{info, warn};

use vaex_core::classifier::{build_prob_cache, train_classifier, ClassifierConfig, ClassifierSnapshot, ClassifierTrainConfig};
use vaex_core::counterfactual::{
    counterfactual_images, fid_eval, opposite_class, r_sweep, reconstructions, sample_seed, InterventionMode, SweepConfig,
};
use vaex_core::data::{generate_synthetic_dataset, load_dataset, split_dataset, AttributeSpec, ImageSet, Split};
use vaex_core::kv::{join_list, KvMap};
use vaex_core::model::{argmax, DecodeOptions, COUNTERFACTUAL_TEMPERATURE};
use vaex_core::probcache::ProbCache;
use vaex_core::train::{evaluate, train, StepRecord, TrainConfig, TrainObserver, TsvLogger};
use vaex_core::{ModelConfig, Tensor, VaexSnapshot};
use vaex_service::ServiceState;

use crate::args::*;
use crate::error::{require, CliError};
use crate::run::RunDir;
use crate::settings::Settings;

pub const SPLIT_FILE: &str = "split.tsv";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const CACHE_FILE: &str = "probs.tsv";
pub const MODEL_FILE: &str = "vaex.ckpt";

type CmdResult = Result<PathBuf, CliError>;

/// Resolved data root: flag, then config file, then `VAEX_DATA_DIR`, then `data`.
pub fn data_root(settings: &Settings) -> PathBuf {
    let fallback = std::env::var_os("VAEX_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
    settings.path("data_dir", fallback)
}

fn artifact(settings: &Settings, key: &str, root: &Path, file: &str) -> PathBuf {
    settings.path(key, root.join(file))
}

fn parse_fractions(s: &str) -> Result<[f64; 3], CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad split fractions `{s}`")))?;
    <[f64; 3]>::try_from(v).map_err(|_| CliError::Usage("split needs three fractions".into()))
}

pub fn model_config(settings: &Settings) -> Result<ModelConfig, CliError> {
    let preset = settings.get("model.preset", "desk".to_string())?;
    let mut kv = match preset.as_str() {
        "desk" => ModelConfig::desk(),
        "tiny" => ModelConfig::tiny(),
        other => return Err(CliError::Usage(format!("unknown model preset `{other}`"))),
    }
    .to_kv();
    let mut overrides = settings.section("model");
    overrides.remove("preset");
    kv.merge(&overrides);
    Ok(ModelConfig::from_kv(&kv)?)
}

fn read_split(root: &Path) -> Result<Split, CliError> {
    let p = root.join(SPLIT_FILE);
    require("dataset split (run `vaex dataset` first)", &p)?;
    Ok(Split::parse(&fs::read_to_string(&p)?)?)
}

fn load_split(root: &Path, size: usize, part: &str) -> Result<ImageSet, CliError> {
    require("dataset labels (run `vaex dataset` first)", &root.join("labels.tsv"))?;
    let split = read_split(root)?;
    let (all, report) = load_dataset(root, size)?;
    if !report.skipped.is_empty() {
        warn!("{} unreadable images skipped", report.skipped.len());
    }
    let wanted: Vec<String> = split.part(part)?.iter().filter(|id| all.index_of(id).is_some()).cloned().collect();
    if wanted.is_empty() {
        return Err(CliError::Usage(format!("split `{part}` is empty")));
    }
    Ok(all.subset(&wanted)?)
}

fn load_classifier(path: &Path) -> Result<ClassifierSnapshot, CliError> {
    require("classifier checkpoint (run `vaex train-classifier` first)", path)?;
    Ok(ClassifierSnapshot::load(path)?)
}

fn load_model(path: &Path) -> Result<VaexSnapshot<f32>, CliError> {
    require("VAEX checkpoint (run `vaex train` first)", path)?;
    Ok(VaexSnapshot::load(path)?)
}

fn load_cache(path: &Path) -> Result<ProbCache, CliError> {
    require("probability cache (run `vaex cache-probs` first)", path)?;
    Ok(ProbCache::read(path)?)
}

pub fn dataset(mut s: Settings, a: DatasetArgs) -> CmdResult {
    s.flag("data_dir", a.out.as_ref().map(|p| p.display()));
    s.flag("dataset.n", a.n);
    s.flag("dataset.seed", a.seed);
    s.flag("dataset.image_size", a.image_size);
    s.flag("dataset.split", a.split.clone());
    s.flag("dataset.split_seed", a.split_seed);
    let root = data_root(&s);
    let n = s.get("dataset.n", 10_000usize)?;
    let seed = s.get("dataset.seed", 7u64)?;
    let spec = AttributeSpec { image_size: s.get("dataset.image_size", 32usize)?, ..AttributeSpec::default() };
    let fractions = parse_fractions(&s.get("dataset.split", "0.8,0.1,0.1".to_string())?)?;
    let split_seed = s.get("dataset.split_seed", seed)?;

    let mut run = RunDir::create(&root, "dataset", &s)?;
    info!("generating {n} sprites at {0}x{0} into {1}", spec.image_size, root.display());
    let manifest = generate_synthetic_dataset(n, seed, &spec, &root)?;
    let split = split_dataset(&manifest.ids(), &manifest.labels(), fractions, split_seed)?;
    fs::write(root.join(SPLIT_FILE), split.to_tsv())?;
    run.seed("dataset", seed);
    run.seed("split", split_seed);
    for f in ["labels.tsv", "manifest.tsv", SPLIT_FILE] {
        run.output(f, &root.join(f))?;
    }
    run.note("split.sizes", format!("{},{},{}", split.train.len(), split.val.len(), split.test.len()));
    println!("dataset: {n} samples ({} train / {} val / {} test) in {}", split.train.len(), split.val.len(), split.test.len(), root.display());
    run.finish()
}

pub fn train_classifier_cmd(mut s: Settings, a: ClassifierArgs) -> CmdResult {
    s.flag("classifier.epochs", a.epochs);
    s.flag("classifier.batch_size", a.batch_size);
    s.flag("classifier.learning_rate", a.lr);
    s.flag("classifier.seed", a.seed);
    s.flag("classifier.out", a.out.as_ref().map(|p| p.display()));
    let root = data_root(&s);
    let out = artifact(&s, "classifier.out", &root, CLASSIFIER_FILE);
    let d = ClassifierTrainConfig::default();
    let tcfg = ClassifierTrainConfig {
        epochs: s.get("classifier.epochs", d.epochs)?,
        batch_size: s.get("classifier.batch_size", d.batch_size)?,
        learning_rate: s.get("classifier.learning_rate", d.learning_rate)?,
        seed: s.get("classifier.seed", d.seed)?,
    };
    let mut ckv = ClassifierConfig::default().to_kv();
    let mut over = s.section("classifier");
    for k in ["epochs", "batch_size", "learning_rate", "seed", "out"] {
        over.remove(k);
    }
    ckv.merge(&over);
    ckv.set("image_size", s.get("classifier.image_size", model_config(&s)?.image_size)?);
    let mcfg = ClassifierConfig::from_kv(&ckv)?;

    let trainset = load_split(&root, mcfg.image_size, "train")?;
    let valset = load_split(&root, mcfg.image_size, "val")?;
    let mut run = RunDir::create(&root, "train-classifier", &s)?;
    run.input("labels", &root.join("labels.tsv"))?;
    run.input("split", &root.join(SPLIT_FILE))?;
    let (snap, report) = train_classifier(&trainset, &valset, mcfg, &tcfg)?;
    let local = run.path.join(CLASSIFIER_FILE);
    snap.save(&local)?;
    let mut log = String::from("epoch\tloss\n");
    for (e, l) in report.epoch_loss.iter().enumerate() {
        log.push_str(&format!("{}\t{l:.6}\n", e + 1));
    }
    fs::write(run.path.join("classifier_log.tsv"), log)?;
    run.seed("classifier", tcfg.seed);
    run.note("val_accuracy", format!("{:.6}", report.val_accuracy));
    run.output("classifier", &local)?;
    run.publish("classifier", &local, &out)?;
    println!("classifier: validation accuracy {:.4} -> {}", report.val_accuracy, out.display());
    run.finish()
}

pub fn cache_probs(mut s: Settings, a: CacheArgs) -> CmdResult {
    s.flag("classifier.path", a.classifier.as_ref().map(|p| p.display()));
    s.flag("cache.path", a.out.as_ref().map(|p| p.display()));
    let root = data_root(&s);
    let cls_path = artifact(&s, "classifier.path", &root, CLASSIFIER_FILE);
    let out = artifact(&s, "cache.path", &root, CACHE_FILE);
    let cls = load_classifier(&cls_path)?;
    require("dataset labels (run `vaex dataset` first)", &root.join("labels.tsv"))?;
    let (all, _) = load_dataset(&root, cls.config().image_size)?;
    let mut run = RunDir::create(&root, "cache-probs", &s)?;
    run.input("classifier", &cls_path)?;
    run.input("labels", &root.join("labels.tsv"))?;
    let cache = build_prob_cache(&cls, &all, 256)?;
    let local = run.path.join(CACHE_FILE);
    cache.write(&local)?;
    run.output("cache", &local)?;
    run.publish("cache", &local, &out)?;
    println!("cached probabilities for {} samples -> {}", cache.len(), out.display());
    run.finish()
}

struct EpochCheckpoints<'a> {
    log: TsvLogger<BufWriter<fs::File>>,
    path: &'a Path,
}

impl TrainObserver for EpochCheckpoints<'_> {
    fn on_step(&mut self, r: &StepRecord) -> vaex_core::Result<()> {
        self.log.on_step(r)
    }

    fn on_epoch_end(&mut self, epoch: usize, snap: &VaexSnapshot<f32>) -> vaex_core::Result<()> {
        self.log.on_epoch_end(epoch, snap)?;
        snap.save(self.path)
    }
}

pub fn train_cmd(mut s: Settings, a: TrainArgs) -> CmdResult {
    s.flag("cache.path", a.cache.as_ref().map(|p| p.display()));
    s.flag("model.out", a.out.as_ref().map(|p| p.display()));
    s.flag("train.epochs", a.epochs);
    s.flag("train.batch_size", a.batch_size);
    s.flag("train.learning_rate", a.lr);
    s.flag("train.decay", a.decay);
    s.flag("train.free_bits", a.free_bits);
    s.flag("train.pixel_var_floor", a.pixel_var_floor);
    s.flag("train.seed", a.seed);
    s.flag("model.init_seed", a.init_seed);
    s.flag("model.preset", a.preset.clone());
    s.flag("model.variant", a.variant.clone());
    let root = data_root(&s);
    let cache_path = artifact(&s, "cache.path", &root, CACHE_FILE);
    let out = artifact(&s, "model.out", &root, MODEL_FILE);
    let tcfg = TrainConfig::from_kv(&s.section("train"))?;
    let init_seed = s.get("model.init_seed", tcfg.seed)?;
    let mcfg = model_config(&s)?;

    let cache = load_cache(&cache_path)?;
    let trainset = load_split(&root, mcfg.image_size, "train")?;
    let valset = load_split(&root, mcfg.image_size, "val")?;
    let mut run = RunDir::create(&root, "train", &s)?;
    run.input("cache", &cache_path)?;
    run.input("split", &root.join(SPLIT_FILE))?;
    run.seed("train", tcfg.seed);
    run.seed("init", init_seed);

    let mut snap = VaexSnapshot::<f32>::init(mcfg, init_seed)?;
    let local = run.path.join(MODEL_FILE);
    let log_path = run.path.join("metrics.tsv");
    let mut obs = EpochCheckpoints { log: TsvLogger::new(BufWriter::new(fs::File::create(&log_path)?))?, path: &local };
    info!("training on {} samples for {} epochs", trainset.len(), tcfg.epochs);
    train(&mut snap, &trainset, &cache, &tcfg, &mut obs)?;
    drop(obs);
    snap.save(&local)?;
    let m = evaluate(&snap, &valset, &cache, 128)?;
    run.note("val.mse", format!("{:.6e}", m.mse));
    run.note("val.bits_per_dim", format!("{:.6}", m.bits_per_dim));
    run.output("metrics", &log_path)?;
    run.output("model", &local)?;
    run.publish("model", &local, &out)?;
    println!("trained: validation mse {:.6}, bits/dim {:.4} -> {}", m.mse, m.bits_per_dim, out.display());
    run.finish()
}

fn parse_r_list(s: &str) -> Result<Vec<f64>, CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad r list `{s}`")))?;
    if v.is_empty() || v.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(CliError::Usage(format!("r values must lie in [0, 1]: `{s}`")));
    }
    Ok(v)
}

fn sweep_config(s: &Settings) -> Result<SweepConfig, CliError> {
    let d = SweepConfig::default();
    let r_values = match s.get_opt::<String>("counterfactual.r")? {
        Some(text) => parse_r_list(&text)?,
        None => d.r_values,
    };
    let intervention: InterventionMode = s.get("counterfactual.intervention", d.intervention.to_string())?.parse()?;
    let temperature = s.get("counterfactual.temperature", COUNTERFACTUAL_TEMPERATURE)?;
    if !(temperature > 0.0) {
        return Err(CliError::Usage("temperature must be positive".into()));
    }
    Ok(SweepConfig { r_values, temperature, intervention, seed: s.get("counterfactual.seed", 0u64)?, batch_size: 64 })
}

fn opposite_targets(cls: &ClassifierSnapshot, set: &ImageSet) -> Result<Vec<usize>, CliError> {
    let c = cls.config().class_count;
    Ok(cls.predict_set(set, 256)?.iter().map(|p| opposite_class(argmax(p), c)).collect())
}

/// Test-set halves used for every Fréchet distance: generated images are
/// derived from half A and compared with the real images of half B.
fn halves(n: usize) -> (Vec<usize>, Vec<usize>) {
    let a = (0..n).step_by(2).collect();
    let b = (1..n).step_by(2).collect();
    (a, b)
}

pub fn eval_cmd(mut s: Settings, a: EvalArgs) -> CmdResult {
    s.flag("model.path", a.checkpoint.as_ref().map(|p| p.display()));
    s.flag("classifier.path", a.classifier.as_ref().map(|p| p.display()));
    s.flag("cache.path", a.cache.as_ref().map(|p| p.display()));
    s.flag("eval.split", a.split.clone());
    s.flag("eval.fid_max", a.fid_max);
    s.flag("counterfactual.r", a.r.clone());
    s.flag("counterfactual.seed", a.seed);
    let root = data_root(&s);
    let metric = a.metric;
    let model_path = artifact(&s, "model.path", &root, MODEL_FILE);
    let cls_path = artifact(&s, "classifier.path", &root, CLASSIFIER_FILE);
    let cache_path = artifact(&s, "cache.path", &root, CACHE_FILE);
    let part = s.get("eval.split", "test".to_string())?;
    let fid_max = s.get("eval.fid_max", 1024usize)?;
    let sweep = sweep_config(&s)?;

    let snap = load_model(&model_path)?;
    let cls = load_classifier(&cls_path)?;
    let cache = load_cache(&cache_path)?;
    let set = load_split(&root, snap.config().image_size, &part)?;
    let mut run = RunDir::create(&root, "eval", &s)?;
    run.input("model", &model_path)?;
    run.input("classifier", &cls_path)?;
    run.input("cache", &cache_path)?;
    run.seed("counterfactual", sweep.seed);
    let mut out = KvMap::new();
    out.set("split", &part);
    out.set("n", set.len());

    let probs = cls.predict_set(&set, 256)?;
    let mut pred = String::from("id\tlabel\tpredicted\tprobs\n");
    let mut correct = 0;
    for ((id, &l), p) in set.ids.iter().zip(&set.labels).zip(&probs) {
        correct += usize::from(argmax(p) == l);
        pred.push_str(&format!("{id}\t{l}\t{}\t{}\n", argmax(p), join_list(&p.iter().map(|v| format!("{v:.9}")).collect::<Vec<_>>())));
    }
    fs::write(run.path.join("predictions.tsv"), pred)?;
    out.set("classifier_accuracy", format!("{:.6}", correct as f64 / set.len() as f64));

    if matches!(metric, Metric::All | Metric::Mse) {
        let m = evaluate(&snap, &set, &cache, 128)?;
        out.set("mse", format!("{:.6e}", m.mse));
        out.set("nll", format!("{:.4}", m.nll));
        out.set("kl", format!("{:.4}", m.kl));
        out.set("bits_per_dim", format!("{:.6}", m.bits_per_dim));
    }
    if matches!(metric, Metric::All | Metric::Success) {
        let targets = opposite_targets(&cls, &set)?;
        let rep = r_sweep(&set, &set.ids, &targets, &sweep, &snap, &cls, None)?;
        fs::write(run.path.join("sweep.tsv"), rep.to_tsv())?;
        for row in &rep.rows {
            out.set(&format!("success.r{}", row.r), format!("{:.2}", row.success_percent));
        }
        out.set("success.max_increase", format!("{:.2}", rep.max_increase()));
    }
    if matches!(metric, Metric::All | Metric::Fid) {
        let (ia, ib) = halves(set.len());
        let (xa, xb) = (set.gather(&ia), set.gather(&ib));
        let ids_a: Vec<&str> = ia.iter().map(|&i| set.ids[i].as_str()).collect();
        let cond = vaex_core::train::conditions_for(&cache, &ids_a)?;
        let recon = reconstructions(&snap, &xa, &cond)?;
        let targets: Vec<usize> = opposite_targets(&cls, &set)?.into_iter().step_by(2).collect();
        let seeds: Vec<u64> = ids_a.iter().map(|id| sample_seed(sweep.seed, id)).collect();
        let opts = DecodeOptions::relaxed(0.0, sweep.temperature);
        let cf = batched(&xa, 64, |lo, hi, x| counterfactual_images(&snap, x, &targets[lo..hi], opts, &seeds[lo..hi]))?;
        let fid_recon = fid_eval(&recon, &xb, &cls, fid_max)?;
        let fid_cf = fid_eval(&cf, &xb, &cls, fid_max)?;
        let baseline = fid_eval(&xa, &xb, &cls, fid_max)?;
        out.set("fid.reconstruction", format!("{fid_recon:.6}"));
        out.set("fid.counterfactual_r0", format!("{fid_cf:.6}"));
        out.set("fid.baseline_split", format!("{baseline:.6}"));
    }
    let mut tsv = String::from("metric\tvalue\n");
    for (k, v) in out.iter() {
        tsv.push_str(&format!("{k}\t{v}\n"));
        println!("{k}\t{v}");
    }
    let eval_path = run.path.join("eval.tsv");
    fs::write(&eval_path, tsv)?;
    run.output("eval", &eval_path)?;
    run.finish()
}

/// Applies `f` to consecutive batch slices of `x` and stacks the results.
fn batched(
    x: &Tensor<f32>,
    batch: usize,
    mut f: impl FnMut(usize, usize, &Tensor<f32>) -> vaex_core::Result<Tensor<f32>>,
) -> vaex_core::Result<Tensor<f32>> {
    let n = x.shape()[0];
    let mut parts = Vec::new();
    for lo in (0..n).step_by(batch) {
        let hi = (lo + batch).min(n);
        let items: Vec<Tensor<f32>> = (lo..hi).map(|i| x.batch_item(i)).collect();
        parts.push(f(lo, hi, &Tensor::stack_batch(&items)?)?);
    }
    Tensor::stack_batch(&parts)
}

pub fn counterfactual_cmd(mut s: Settings, a: CounterfactualArgs) -> CmdResult {
    s.flag("model.path", a.checkpoint.as_ref().map(|p| p.display()));
    s.flag("classifier.path", a.classifier.as_ref().map(|p| p.display()));
    s.flag("counterfactual.r", a.r.clone());
    s.flag("counterfactual.seed", a.seed);
    s.flag("counterfactual.temperature", a.temperature);
    s.flag("counterfactual.intervention", a.intervention.clone());
    s.flag("counterfactual.target", a.target);
    s.flag("counterfactual.grid", a.grid.as_ref().map(|p| p.display()));
    s.flag("counterfactual.split", a.split.clone());
    s.flag("counterfactual.ids", (!a.id.is_empty()).then(|| a.id.join(",")));
    let root = data_root(&s);
    let model_path = artifact(&s, "model.path", &root, MODEL_FILE);
    let cls_path = artifact(&s, "classifier.path", &root, CLASSIFIER_FILE);
    let sweep = sweep_config(&s)?;
    let ids: Option<Vec<String>> = s.list("counterfactual.ids")?;
    let part = s.get("counterfactual.split", "test".to_string())?;
    let target: Option<usize> = s.get_opt("counterfactual.target")?;

    let snap = load_model(&model_path)?;
    let cls = load_classifier(&cls_path)?;
    let c = snap.config().class_count;
    if let Some(t) = target.filter(|&t| t >= c) {
        return Err(CliError::Usage(format!("--target {t} out of range for {c} classes")));
    }
    require("dataset labels (run `vaex dataset` first)", &root.join("labels.tsv"))?;
    let (all, _) = load_dataset(&root, snap.config().image_size)?;
    let set = match &ids {
        Some(ids) => {
            if let Some(missing) = ids.iter().find(|id| all.index_of(id).is_none()) {
                return Err(CliError::Failed(anyhow::anyhow!("unknown sample id `{missing}`")));
            }
            all.subset(ids)?
        }
        None => {
            let split = read_split(&root)?;
            all.subset(split.part(&part)?)?
        }
    };
    let targets = match target {
        Some(t) => vec![t; set.len()],
        None => opposite_targets(&cls, &set)?,
    };
    let mut run = RunDir::create(&root, "counterfactual", &s)?;
    run.input("model", &model_path)?;
    run.input("classifier", &cls_path)?;
    run.seed("counterfactual", sweep.seed);
    let grid_dir = s.get_opt::<String>("counterfactual.grid")?.map(PathBuf::from).unwrap_or_else(|| run.path.join("grids"));
    let rep = r_sweep(&set, &set.ids, &targets, &sweep, &snap, &cls, Some(&grid_dir))
        .with_context(|| format!("sweeping {} samples", set.len()))?;
    let table = grid_dir.join("sweep.tsv");
    fs::write(&table, rep.to_tsv())?;
    fs::write(run.path.join("sweep.tsv"), rep.to_tsv())?;
    run.output("sweep", &table)?;
    run.note("grid_dir", grid_dir.display());
    print!("{}", rep.to_tsv());
    run.finish()
}

pub fn serve_cmd(mut s: Settings, a: ServeArgs) -> CmdResult {
    s.flag("model.path", a.checkpoint.as_ref().map(|p| p.display()));
    s.flag("classifier.path", a.classifier.as_ref().map(|p| p.display()));
    s.flag("serve.port", a.port);
    s.flag("serve.host", a.host.clone());
    s.flag("serve.split", a.split.clone());
    s.flag("serve.origin", a.origin.clone());
    let root = data_root(&s);
    let model_path = artifact(&s, "model.path", &root, MODEL_FILE);
    let cls_path = artifact(&s, "classifier.path", &root, CLASSIFIER_FILE);
    let port = s.get("serve.port", 8080u16)?;
    let host: std::net::IpAddr =
        s.get::<String>("serve.host", "127.0.0.1".into())?.parse().map_err(|_| CliError::Usage("bad --host".into()))?;
    let part = s.get("serve.split", "test".to_string())?;
    let origin: Option<String> = s.get_opt("serve.origin")?;

    let snap = load_model(&model_path)?;
    let cls = load_classifier(&cls_path)?;
    let set = load_split(&root, snap.config().image_size, &part)?;
    let mut run = RunDir::create(&root, "serve", &s)?;
    run.input("model", &model_path)?;
    run.input("classifier", &cls_path)?;
    let state = Arc::new(ServiceState::new(snap, cls, set)?);
    run.note("checkpoint_hash", state.checkpoint_hash());
    let path = run.finish()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(vaex_service::serve(state, SocketAddr::new(host, port), origin.as_deref()))?;
    Ok(path)
}
