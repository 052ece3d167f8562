//! Command implementations and the experiment matrix.
//!
//! Every command writes into its own output directory: the resolved config
//! (`config.txt`), a `manifest.json`, and its artifacts. Metric files depend
//! only on the config and the inputs, so a rerun reproduces them bytewise;
//! timestamps live in the manifest alone.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::classifier::{train_classifier, ClassifierConfig, FrozenClassifier};
use crate::config::Config;
use crate::data::{contaminate_pool, load_pool, save_pool, Dataset, ReferencePool, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, test_pairings, EvalReport, TOP_K};
use crate::hde::DiffMapRecord;
use crate::metrics::{top_k_mass, welch_t_test};
use crate::model::Generator;
use crate::training::{audit_leakage, continue_training, Trained, MODEL_FILE};

pub const VERSION: &str = concat!("diffvp ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const CLASSIFIER_CONFIG_FILE: &str = "classifier.json";
pub const EVAL_FILE: &str = "eval.json";
pub const AUDIT_FILE: &str = "audit.json";

/// Table-3 rows followed by the pixel-level comparison row.
pub const ABLATION_VARIANTS: &[&str] = &["baseline", "plus-e", "global-e", "local-e", "full", "pixel-diff"];
pub const PREFIX_SWEEP: &[usize] = &[4, 8, 16, 24, 32];
pub const SEEDS: &[u64] = &[21, 22, 23, 24, 25];
/// Pool sizes for the robustness study; 0 means the whole pool.
pub const POOL_SIZES: &[usize] = &[1, 10, 0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Collects inputs and outputs while a command runs, then writes the
/// manifest and config beside them.
pub struct Run {
    dir: PathBuf,
    command: String,
    config: Config,
    started: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Run {
    pub fn start(dir: &Path, command: &str, config: &Config) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config: config.clone(),
            started: now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    /// Writes `<name>.csv` and `<name>.json`.
    pub fn write_table<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        let p = self.path(&format!("{name}.csv"));
        fs::write(p, bytes)?;
        self.write_json(&format!("{name}.json"), &rows)
    }

    pub fn finish(mut self, seed: u64) -> Result<RunManifest> {
        let cfg = self.path(CONFIG_FILE);
        fs::write(cfg, self.config.render())?;
        let manifest = RunManifest {
            command: self.command,
            config: self.config.entries().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            seed,
            version: VERSION.to_string(),
            started_unix: self.started,
            finished_unix: now(),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        fs::write(self.dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

/// One row of any result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub variant: String,
    pub seed: u64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    pub top8: f64,
}

/// Metric columns of [`MetricRow`] by name.
pub const METRICS: &[&str] = &[
    "bleu1", "bleu2", "bleu3", "bleu4", "rouge1", "rouge2", "rouge_l", "meteor", "ce_precision", "ce_recall", "ce_f1",
    "top8",
];

impl MetricRow {
    pub fn new(label: &str, variant: &str, seed: u64, r: &EvalReport) -> Self {
        Self {
            label: label.to_string(),
            variant: variant.to_string(),
            seed,
            bleu1: r.nlg.bleu[0],
            bleu2: r.nlg.bleu[1],
            bleu3: r.nlg.bleu[2],
            bleu4: r.nlg.bleu[3],
            rouge1: r.nlg.rouge1,
            rouge2: r.nlg.rouge2,
            rouge_l: r.nlg.rouge_l,
            meteor: r.nlg.meteor,
            ce_precision: r.ce.precision,
            ce_recall: r.ce.recall,
            ce_f1: r.ce.f1,
            top8: r.top8_abnormal,
        }
    }

    pub fn metric(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "bleu1" => self.bleu1,
            "bleu2" => self.bleu2,
            "bleu3" => self.bleu3,
            "bleu4" => self.bleu4,
            "rouge1" => self.rouge1,
            "rouge2" => self.rouge2,
            "rouge_l" => self.rouge_l,
            "meteor" => self.meteor,
            "ce_precision" => self.ce_precision,
            "ce_recall" => self.ce_recall,
            "ce_f1" => self.ce_f1,
            "top8" => self.top8,
            _ => return Err(Error::Invalid(format!("unknown metric {name:?}"))),
        })
    }
}

/// What a generator run audited about itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainAudit {
    pub test_ids_in_log: usize,
    pub classifier_checksum_before: Option<u64>,
    pub classifier_checksum_after: Option<u64>,
    pub classifier_unchanged: bool,
}

/// A loaded dataset with its frozen classifier.
#[derive(Debug, Clone)]
pub struct Lab {
    pub dataset: Dataset,
    pub train_pool: ReferencePool,
    pub classifier: Option<FrozenClassifier>,
    /// Checksum of the classifier file as loaded, if any.
    pub classifier_file: Option<(PathBuf, u64)>,
}

impl Lab {
    /// Synthesises the dataset and trains the classifier in memory.
    pub fn build(cfg: &Config) -> Result<Self> {
        let dataset = Dataset::synthesize(&cfg.synth()?)?;
        let train: Vec<_> = dataset.split(Split::Train).collect();
        let (cls, _) = train_classifier(&train, &cfg.classifier()?)?;
        let train_pool = dataset.pool(Split::Train, usize::MAX)?;
        Ok(Self {
            dataset,
            train_pool,
            classifier: Some(cls),
            classifier_file: None,
        })
    }

    pub fn open(data: &Path, classifier: Option<&Path>) -> Result<Self> {
        let dataset = Dataset::load(data)?;
        let train_pool = load_pool(data, Split::Train)?;
        let (classifier, classifier_file) = match classifier {
            Some(dir) => {
                let c = load_classifier(dir)?;
                let sum = c.checksum();
                (Some(c), Some((dir.to_path_buf(), sum)))
            }
            None => (None, None),
        };
        Ok(Self {
            dataset,
            train_pool,
            classifier,
            classifier_file,
        })
    }

    /// Trains (or resumes) a generator. With `dir`, state is saved after
    /// every epoch, with a per-epoch weight snapshot. Both audits run at
    /// the end and fail the run if violated.
    pub fn train(&self, cfg: &Config, dir: Option<&Path>, resume: bool) -> Result<(Trained, TrainAudit)> {
        let model_cfg = cfg.model()?;
        let tcfg = cfg.train()?;
        let before = self.classifier.as_ref().map(FrozenClassifier::checksum);
        let mut state = match dir {
            Some(d) if resume && d.join(crate::training::STATE_FILE).exists() => Trained::load(d, &model_cfg, tcfg.lr)?,
            _ => Trained::fresh(&model_cfg, tcfg.lr)?,
        };
        for epoch in state.completed_epochs()..tcfg.epochs {
            let step_cfg = crate::training::TrainConfig {
                epochs: epoch + 1,
                ..tcfg.clone()
            };
            state = continue_training(&self.dataset, &self.train_pool, self.classifier.as_ref(), &step_cfg, state)?;
            if let Some(d) = dir {
                state.save(d)?;
                state.model.save(&d.join(format!("epoch-{}.ckpt", epoch + 1)), &state.store)?;
            }
            log::info!("epoch {} mean loss {:.5}", epoch + 1, state.log.epochs[epoch]);
        }
        let audit = self.audit(&state, before)?;
        Ok((state, audit))
    }

    fn audit(&self, state: &Trained, before: Option<u64>) -> Result<TrainAudit> {
        let test_pool = self.dataset.pool(Split::Test, usize::MAX)?;
        audit_leakage(&state.log, &self.dataset, &test_pool)?;
        let after = self.classifier.as_ref().map(FrozenClassifier::checksum);
        let mut unchanged = before == after;
        if let Some((path, loaded)) = &self.classifier_file {
            unchanged &= load_classifier(path)?.checksum() == *loaded;
        }
        if !unchanged {
            return Err(Error::Frozen("classifier checksum changed during generator training".into()));
        }
        Ok(TrainAudit {
            test_ids_in_log: 0,
            classifier_checksum_before: before,
            classifier_checksum_after: after,
            classifier_unchanged: unchanged,
        })
    }

    /// Test pool and (possibly shifted) dataset per the `eval.*` keys.
    pub fn eval_inputs(&self, cfg: &Config) -> Result<(Cow<'_, Dataset>, ReferencePool)> {
        let mut pool = self.dataset.pool(Split::Test, cfg.cap("eval.pool_size")?)?;
        let ratio = cfg.f64("eval.contamination")?;
        if ratio > 0.0 {
            pool = contaminate_pool(&pool, self.dataset.cases(), ratio)?;
        }
        let (gain, bias, noise) = (cfg.f32("eval.shift_gain")?, cfg.f32("eval.shift_bias")?, cfg.f32("eval.shift_noise")?);
        let dataset = if gain != 1.0 || bias != 0.0 || noise != 0.0 {
            let mut shifted = self.dataset.clone();
            shifted.shift_members(&pool, gain, bias, noise, cfg.u64("eval.shift_seed")?)?;
            Cow::Owned(shifted)
        } else {
            Cow::Borrowed(&self.dataset)
        };
        Ok((dataset, pool))
    }

    pub fn evaluate(&self, cfg: &Config, model: &Generator, store: &ParamStore) -> Result<EvalReport> {
        let (dataset, pool) = self.eval_inputs(cfg)?;
        evaluate(model, store, &dataset, &pool, self.classifier.as_ref(), &cfg.flags()?, &cfg.eval()?)
    }

    /// Trains and evaluates one variant; with `dir`, the run is saved there.
    pub fn train_eval(&self, cfg: &Config, dir: Option<&Path>) -> Result<(Trained, TrainAudit, EvalReport)> {
        let (t, audit) = self.train(cfg, dir, false)?;
        let report = self.evaluate(cfg, &t.model, &t.store)?;
        Ok((t, audit, report))
    }
}

pub fn load_classifier(dir: &Path) -> Result<FrozenClassifier> {
    let cfg_path = dir.join(CLASSIFIER_CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Error::Missing(format!("classifier config {}", cfg_path.display())));
    }
    let cfg: ClassifierConfig = serde_json::from_str(&fs::read_to_string(cfg_path)?)?;
    FrozenClassifier::load(&dir.join(CLASSIFIER_FILE), cfg)
}

/// Replaces the model and variant keys of `cfg` with those a run was
/// trained with.
pub fn adopt_run_config(cfg: &mut Config, run: &Path) -> Result<()> {
    let path = run.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::Missing(format!("run config {}", path.display())));
    }
    let mut trained = cfg.clone();
    trained.apply_file(&path)?;
    for (k, v) in trained.entries() {
        if k.starts_with("model.") || k == "train.variant" {
            cfg.set(k, v)?;
        }
    }
    Ok(())
}

pub fn load_run(cfg: &Config, run: &Path) -> Result<(Generator, ParamStore)> {
    Generator::load(&run.join(MODEL_FILE), cfg.model()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train_cases: usize,
    pub test_cases: usize,
    pub train_normals: usize,
    pub test_normals: usize,
    pub train_pool: usize,
    pub test_pool: usize,
}

pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<SynthSummary> {
    let mut run = Run::start(out, "synth", cfg)?;
    let synth = cfg.synth()?;
    let ds = Dataset::synthesize(&synth)?;
    ds.save(out)?;
    run.path("cases.jsonl");
    run.path("volumes.bin");
    let mut pools = Vec::new();
    for split in [Split::Train, Split::Test] {
        let pool = ds.pool(split, usize::MAX)?;
        save_pool(out, &pool)?;
        run.path(&format!("pool_{split}.json"));
        pools.push(pool.len());
    }
    let count = |split, normal: bool| ds.split(split).filter(|c| !normal || c.is_normal()).count();
    let summary = SynthSummary {
        train_cases: count(Split::Train, false),
        test_cases: count(Split::Test, false),
        train_normals: count(Split::Train, true),
        test_normals: count(Split::Test, true),
        train_pool: pools[0],
        test_pool: pools[1],
    };
    run.write_json("synth.json", &summary)?;
    run.finish(synth.seed)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub epoch_losses: Vec<f64>,
    pub checksum: u64,
}

pub fn cmd_train_classifier(cfg: &Config, data: &Path, out: &Path) -> Result<ClassifierSummary> {
    let mut run = Run::start(out, "train-classifier", cfg)?;
    run.input("data", data);
    let ds = Dataset::load(data)?;
    let ccfg = cfg.classifier()?;
    let train: Vec<_> = ds.split(Split::Train).collect();
    let (cls, log) = train_classifier(&train, &ccfg)?;
    let p = run.path(CLASSIFIER_FILE);
    cls.save(&p)?;
    run.write_json(CLASSIFIER_CONFIG_FILE, &ccfg)?;
    let summary = ClassifierSummary {
        epoch_losses: log,
        checksum: cls.checksum(),
    };
    run.write_json("classifier_log.json", &summary)?;
    run.finish(ccfg.seed)?;
    Ok(summary)
}

/// Trains one generator into `out`. With `resume`, continues from the
/// state saved there; the model keys must match the saved config.
pub fn cmd_train(cfg: &Config, data: &Path, classifier: Option<&Path>, out: &Path, resume: bool) -> Result<TrainAudit> {
    if resume && out.join(CONFIG_FILE).exists() {
        let mut saved = cfg.clone();
        saved.apply_file(&out.join(CONFIG_FILE))?;
        let differs = cfg
            .entries()
            .zip(saved.entries())
            .any(|((k, a), (_, b))| k != "train.epochs" && a != b);
        if differs {
            return Err(Error::Config("resume config differs from the saved run".into()));
        }
    }
    let lab = Lab::open(data, classifier)?;
    let mut run = Run::start(out, "train", cfg)?;
    run.input("data", data);
    if let Some(c) = classifier {
        run.input("classifier", c);
    }
    let (state, audit) = lab.train(cfg, Some(out), resume)?;
    for name in [
        MODEL_FILE,
        crate::training::OPTIM_FILE,
        crate::training::LOG_FILE,
        crate::training::STATE_FILE,
    ] {
        run.path(name);
    }
    for e in 1..=state.completed_epochs() {
        run.path(&format!("epoch-{e}.ckpt"));
    }
    run.write_json(AUDIT_FILE, &audit)?;
    run.finish(cfg.u64("train.seed")?)?;
    Ok(audit)
}

pub fn cmd_eval(cfg: &Config, data: &Path, classifier: Option<&Path>, run_dir: &Path, out: &Path) -> Result<EvalReport> {
    let mut cfg = cfg.clone();
    adopt_run_config(&mut cfg, run_dir)?;
    let lab = Lab::open(data, classifier)?;
    let (model, store) = load_run(&cfg, run_dir)?;
    let mut run = Run::start(out, "eval", &cfg)?;
    run.input("data", data);
    run.input("run", run_dir);
    if let Some(c) = classifier {
        run.input("classifier", c);
    }
    let report = lab.evaluate(&cfg, &model, &store)?;
    run.write_json(EVAL_FILE, &report)?;
    run.finish(cfg.u64("eval.pairing_seed")?)?;
    Ok(report)
}

fn variant_run(lab: &Lab, cfg: &Config, dir: &Path, label: &str, seed: u64) -> Result<MetricRow> {
    let variant = cfg.get("train.variant")?.to_string();
    let mut run = Run::start(dir, "train+eval", cfg)?;
    let (_, audit, report) = lab.train_eval(cfg, Some(dir))?;
    run.path(MODEL_FILE);
    run.write_json(AUDIT_FILE, &audit)?;
    run.write_json(EVAL_FILE, &report)?;
    run.finish(seed)?;
    log::info!("{label} {variant}: bleu1 {:.2} ce_f1 {:.4}", report.nlg.bleu[0], report.ce.f1);
    Ok(MetricRow::new(label, &variant, seed, &report))
}

/// Trains and evaluates every listed variant under one config.
pub fn cmd_ablate(cfg: &Config, data: &Path, classifier: Option<&Path>, out: &Path, variants: &[String]) -> Result<Vec<MetricRow>> {
    let lab = Lab::open(data, classifier)?;
    let mut run = Run::start(out, "ablate", cfg)?;
    run.input("data", data);
    let seed = cfg.u64("train.seed")?;
    let mut rows = Vec::new();
    for v in variants {
        let mut c = cfg.clone();
        c.set("train.variant", v)?;
        rows.push(variant_run(&lab, &c, &out.join(v), v, seed)?);
    }
    run.write_table("ablation", &rows)?;
    run.finish(seed)?;
    Ok(rows)
}

pub fn cmd_sweep_prefix(cfg: &Config, data: &Path, classifier: Option<&Path>, out: &Path, lengths: &[usize]) -> Result<Vec<MetricRow>> {
    if lengths.is_empty() {
        return Err(Error::Invalid("prefix sweep needs at least one length".into()));
    }
    let lab = Lab::open(data, classifier)?;
    let mut run = Run::start(out, "sweep-prefix", cfg)?;
    run.input("data", data);
    let seed = cfg.u64("train.seed")?;
    let mut rows = Vec::new();
    for &p in lengths {
        let mut c = cfg.clone();
        c.set("model.prefix_len", &p.to_string())?;
        rows.push(variant_run(&lab, &c, &out.join(format!("p{p}")), &p.to_string(), seed)?);
    }
    run.write_table("sweep_prefix", &rows)?;
    run.finish(seed)?;
    Ok(rows)
}

/// Per-metric mean±std per variant, and a Welch test of each later variant
/// against the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub metric: String,
    pub variant: String,
    pub mean: f64,
    pub std: f64,
    pub versus: String,
    pub t: Option<f64>,
    pub dof: Option<f64>,
    pub p_value: Option<f64>,
}

pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

pub fn summarize_seeds(rows: &[MetricRow], variants: &[String]) -> Result<Vec<SeedSummary>> {
    let mut out = Vec::new();
    let column = |v: &str, m: &str| -> Result<Vec<f64>> {
        rows.iter().filter(|r| r.variant == v).map(|r| r.metric(m)).collect()
    };
    for &m in METRICS {
        let base = column(&variants[0], m)?;
        for v in variants {
            let x = column(v, m)?;
            let (mean, std) = mean_std(&x);
            let test = if v == &variants[0] {
                None
            } else {
                match welch_t_test(&x, &base) {
                    Ok(w) => Some(w),
                    Err(Error::DegenerateSamples) => None,
                    Err(e) => return Err(e),
                }
            };
            out.push(SeedSummary {
                metric: m.to_string(),
                variant: v.clone(),
                mean,
                std,
                versus: variants[0].clone(),
                t: test.map(|w| w.t),
                dof: test.map(|w| w.dof),
                p_value: test.map(|w| w.p_two_sided),
            });
        }
    }
    Ok(out)
}

/// Trains every variant under every seed (model init and data order).
pub fn cmd_seeds(
    cfg: &Config,
    data: &Path,
    classifier: Option<&Path>,
    out: &Path,
    seeds: &[u64],
    variants: &[String],
) -> Result<(Vec<MetricRow>, Vec<SeedSummary>)> {
    if seeds.len() < 2 {
        return Err(Error::Invalid("seed study needs at least two seeds".into()));
    }
    if variants.is_empty() {
        return Err(Error::Invalid("seed study needs at least one variant".into()));
    }
    let lab = Lab::open(data, classifier)?;
    let mut run = Run::start(out, "seeds", cfg)?;
    run.input("data", data);
    let mut rows = Vec::new();
    for v in variants {
        for &s in seeds {
            let mut c = cfg.clone();
            c.set("train.variant", v)?;
            c.set("train.seed", &s.to_string())?;
            c.set("model.seed", &s.to_string())?;
            rows.push(variant_run(&lab, &c, &out.join(format!("{v}-{s}")), &format!("seed {s}"), s)?);
        }
    }
    let summary = summarize_seeds(&rows, variants)?;
    run.write_table("seeds", &rows)?;
    run.write_table("seeds_summary", &summary)?;
    run.finish(seeds[0])?;
    Ok((rows, summary))
}

/// Evaluates one checkpoint against test pools of several sizes.
pub fn cmd_pool_study(
    cfg: &Config,
    data: &Path,
    classifier: Option<&Path>,
    run_dir: &Path,
    out: &Path,
    sizes: &[usize],
) -> Result<Vec<MetricRow>> {
    let mut cfg = cfg.clone();
    adopt_run_config(&mut cfg, run_dir)?;
    let lab = Lab::open(data, classifier)?;
    let (model, store) = load_run(&cfg, run_dir)?;
    let mut run = Run::start(out, "pool-study", &cfg)?;
    run.input("data", data);
    run.input("run", run_dir);
    let rows = pool_study(&lab, &cfg, &model, &store, sizes)?;
    run.write_table("pool_study", &rows)?;
    run.finish(cfg.u64("eval.pairing_seed")?)?;
    Ok(rows)
}

pub fn pool_study(lab: &Lab, cfg: &Config, model: &Generator, store: &ParamStore, sizes: &[usize]) -> Result<Vec<MetricRow>> {
    let variant = cfg.get("train.variant")?.to_string();
    let seed = cfg.u64("eval.pairing_seed")?;
    sizes
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.set("eval.pool_size", &n.to_string())?;
            let report = lab.evaluate(&c, model, store)?;
            let label = if n == 0 { "all".to_string() } else { report.audit.pool_size.to_string() };
            Ok(MetricRow::new(&label, &variant, seed, &report))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffMapAggregate {
    pub label: String,
    pub run: String,
    pub cases: usize,
    pub abnormal_cases: usize,
    pub top_8_mass: f64,
    pub top_8_mass_all: f64,
}

/// Per-case importance scores and local weights for each run, with mean
/// top-8 mass over abnormal and all cases.
pub fn diffmap(lab: &Lab, cfg: &Config, model: &Generator, store: &ParamStore) -> Result<(Vec<DiffMapRecord>, f64, f64, usize)> {
    let (dataset, pool) = lab.eval_inputs(cfg)?;
    let pairs = test_pairings(&dataset, &pool, cfg.u64("eval.pairing_seed")?, cfg.cap("eval.limit")?)?;
    let d = model.config.d;
    use rayon::prelude::*;
    let records: Vec<(DiffMapRecord, bool)> = pairs
        .par_iter()
        .map(|&(c, r)| {
            let mut g = Graph::new();
            let it = model.latents(&mut g, store, c.volume.voxels())?;
            let ir = model.latents(&mut g, store, r.volume.voxels())?;
            Ok((DiffMapRecord::new(&c.id, &r.id, g.value(it), g.value(ir), d)?, !c.is_normal()))
        })
        .collect::<Result<_>>()?;
    let mut abnormal = Vec::new();
    let mut all = Vec::new();
    for (rec, ab) in &records {
        let m = top_k_mass(&rec.scores, TOP_K.min(rec.scores.len()))?;
        all.push(m);
        if *ab {
            abnormal.push(m);
        }
    }
    let mean = |x: &[f64]| if x.is_empty() { 0.0 } else { x.iter().sum::<f64>() / x.len() as f64 };
    Ok((
        records.into_iter().map(|r| r.0).collect(),
        mean(&abnormal),
        mean(&all),
        abnormal.len(),
    ))
}

pub fn cmd_diffmap(cfg: &Config, data: &Path, runs: &[(String, PathBuf)], out: &Path) -> Result<Vec<DiffMapAggregate>> {
    if runs.is_empty() {
        return Err(Error::Invalid("diffmap needs at least one run".into()));
    }
    let lab = Lab::open(data, None)?;
    let mut run = Run::start(out, "diffmap", cfg)?;
    run.input("data", data);
    let mut aggregates = Vec::new();
    for (label, dir) in runs {
        let mut c = cfg.clone();
        adopt_run_config(&mut c, dir)?;
        run.input(label, dir);
        let (model, store) = load_run(&c, dir)?;
        let (records, top8, top8_all, abnormal) = diffmap(&lab, &c, &model, &store)?;
        run.write_json(&format!("diffmap_{label}.json"), &records)?;
        aggregates.push(DiffMapAggregate {
            label: label.clone(),
            run: dir.display().to_string(),
            cases: records.len(),
            abnormal_cases: abnormal,
            top_8_mass: top8,
            top_8_mass_all: top8_all,
        });
    }
    run.write_table("diffmap_aggregate", &aggregates)?;
    run.finish(cfg.u64("eval.pairing_seed")?)?;
    Ok(aggregates)
}

/// Bytes of every checkpoint-free artifact in `dir`, keyed by file name.
pub fn metric_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let metric = name.ends_with(".json") || name.ends_with(".csv") || name.ends_with(".jsonl");
        if p.is_file() && metric && name != MANIFEST_FILE {
            out.insert(name, fs::read(&p)?);
        }
    }
    Ok(out)
}
