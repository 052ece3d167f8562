//! Joint training of the generator with random normal-reference pairing.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{checkpoint, Graph, ParamStore};
use crate::classifier::FrozenClassifier;
use crate::data::{mix_seed, CaseRecord, Dataset, ReferencePool, Split};
use crate::dpg::{anchor_to_prompt, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::{Flags, Generator, ModelConfig};
use crate::optim::{clip_grad_norm, graph_grads, parallel_accumulate, Adam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
    pub clip: f64,
    pub flags: Flags,
    pub threshold: f32,
    /// Cap on train-pool members; `usize::MAX` keeps every normal case.
    pub pool_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1,
            lr: 5e-5,
            seed: 21,
            clip: 1.0,
            flags: Flags::FULL,
            threshold: DEFAULT_THRESHOLD,
            pool_size: usize::MAX,
        }
    }
}

/// One optimiser step. With batches larger than one the losses are batch
/// means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub case_ids: Vec<String>,
    pub reference_ids: Vec<String>,
    pub l_gen: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Mean `L_total` per epoch.
    pub epochs: Vec<f64>,
}

impl TrainLog {
    /// Every id named anywhere in the log.
    pub fn ids(&self) -> BTreeSet<&str> {
        self.steps
            .iter()
            .flat_map(|s| s.case_ids.iter().chain(&s.reference_ids))
            .map(String::as_str)
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Fails if any id in `log` belongs to a test case or test pool.
pub fn audit_leakage(log: &TrainLog, dataset: &Dataset, test_pool: &ReferencePool) -> Result<()> {
    for id in log.ids() {
        if test_pool.members.iter().any(|m| m == id) {
            return Err(Error::Leakage(format!("test pool id {id} in training log")));
        }
        if dataset.get(id)?.split != Split::Train {
            return Err(Error::Leakage(format!("non-train case {id} in training log")));
        }
    }
    Ok(())
}

/// Anchor tokens per case id from the frozen classifier (or `findings: none`
/// for every case without one).
pub fn anchors_for(
    cases: &[&CaseRecord],
    classifier: Option<&FrozenClassifier>,
    threshold: f32,
) -> Result<HashMap<String, Vec<u32>>> {
    use rayon::prelude::*;
    cases
        .par_iter()
        .map(|c| {
            let probs = match classifier {
                Some(cls) => cls.predict(&c.volume)?,
                None => [0.0; crate::data::NUM_CLASSES],
            };
            Ok((c.id.clone(), anchor_to_prompt(&probs, threshold)))
        })
        .collect()
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIM_FILE: &str = "optim.ckpt";
pub const LOG_FILE: &str = "train.log.jsonl";
pub const STATE_FILE: &str = "train_state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateFile {
    step: u64,
    epochs: Vec<f64>,
}

/// A generator with its weights, optimiser state, and log so far.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Generator,
    pub store: ParamStore,
    pub opt: Adam,
    pub log: TrainLog,
}

impl Trained {
    pub fn fresh(model_cfg: &ModelConfig, lr: f32) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Generator::new(&mut store, model_cfg.clone())?;
        let opt = Adam::new(&store, lr);
        Ok(Self {
            model,
            store,
            opt,
            log: TrainLog::default(),
        })
    }

    pub fn completed_epochs(&self) -> usize {
        self.log.epochs.len()
    }

    /// Writes weights, optimiser moments, the step log, and epoch means.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(&dir.join(MODEL_FILE), &self.store)?;
        checkpoint::save(&dir.join(OPTIM_FILE), &self.opt.state(&self.store))?;
        fs::write(dir.join(LOG_FILE), self.log.to_jsonl()?)?;
        let state = StateFile {
            step: self.opt.steps(),
            epochs: self.log.epochs.clone(),
        };
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, model_cfg: &ModelConfig, lr: f32) -> Result<Self> {
        let (model, store) = Generator::load(&dir.join(MODEL_FILE), model_cfg.clone())?;
        let state_path = dir.join(STATE_FILE);
        if !state_path.exists() {
            return Err(Error::Missing(format!("training state {}", state_path.display())));
        }
        let state: StateFile = serde_json::from_str(&fs::read_to_string(state_path)?)?;
        let moments = checkpoint::load(&dir.join(OPTIM_FILE))?;
        let opt = Adam::restore(&store, lr, state.step, &moments)?;
        let steps = fs::read_to_string(dir.join(LOG_FILE))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
        if steps.last().map(|s| s.step).unwrap_or(0) != state.step {
            return Err(Error::Invalid("training log and optimiser step disagree".into()));
        }
        Ok(Self {
            model,
            store,
            opt,
            log: TrainLog {
                steps,
                epochs: state.epochs,
            },
        })
    }
}

/// Trains a fresh generator on the training split.
pub fn train_generator(
    dataset: &Dataset,
    pool: &ReferencePool,
    classifier: Option<&FrozenClassifier>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Trained> {
    continue_training(dataset, pool, classifier, cfg, Trained::fresh(model_cfg, cfg.lr)?)
}

/// Runs the remaining epochs up to `cfg.epochs`. Each epoch shuffles with
/// its own seed, so a resumed run matches an uninterrupted one exactly.
pub fn continue_training(
    dataset: &Dataset,
    pool: &ReferencePool,
    classifier: Option<&FrozenClassifier>,
    cfg: &TrainConfig,
    state: Trained,
) -> Result<Trained> {
    if pool.split != Split::Train {
        return Err(Error::Leakage(format!("training with a {} pool", pool.split)));
    }
    if cfg.flags.use_e && classifier.is_none() {
        return Err(Error::Missing("classifier checkpoint required when the anchor is enabled".into()));
    }
    let pool = pool.truncated(cfg.pool_size)?;
    let cases: Vec<&CaseRecord> = dataset.split(Split::Train).collect();
    if cases.is_empty() {
        return Err(Error::Invalid("no training cases".into()));
    }
    let anchors = anchors_for(&cases, classifier, cfg.threshold)?;

    let Trained {
        model,
        mut store,
        mut opt,
        mut log,
    } = state;
    opt.lr = cfg.lr;
    let bs = cfg.batch_size.max(1);

    for epoch in log.epochs.len()..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for batch in order.chunks(bs) {
            // references are drawn before the parallel section so the draw
            // order is fixed
            let mut jobs = Vec::with_capacity(batch.len());
            for &i in batch {
                let c = cases[i];
                let r = if cfg.flags.needs_reference() {
                    Some(dataset.sample_reference(&pool, &mut rng)?)
                } else {
                    None
                };
                if let Some(r) = r {
                    if r.split != c.split {
                        return Err(Error::Leakage(format!("reference {} from {} split", r.id, r.split)));
                    }
                }
                jobs.push((c, r));
            }
            store.zero_grads();
            let scale = 1.0 / batch.len() as f32;
            let losses = parallel_accumulate(&mut store, &jobs, scale, |s, (c, r)| {
                let mut g = Graph::new();
                let l = model.losses(
                    &mut g,
                    s,
                    &cfg.flags,
                    c.volume.voxels(),
                    r.map(|r| r.volume.voxels()),
                    &anchors[&c.id],
                    &c.report,
                    &c.labels,
                )?;
                g.backward(l.total)?;
                let vals = (g.value(l.gen)[0] as f64, g.value(l.cls)[0] as f64, g.value(l.total)[0] as f64);
                Ok((vals, graph_grads(&g, s)))
            })?;
            let n = losses.len() as f64;
            let mean = |f: fn(&(f64, f64, f64)) -> f64| losses.iter().map(f).sum::<f64>() / n;
            let grad_norm = clip_grad_norm(&mut store, cfg.clip);
            opt.step(&mut store)?;
            let rec = StepRecord {
                step: opt.steps(),
                epoch,
                case_ids: jobs.iter().map(|(c, _)| c.id.clone()).collect(),
                reference_ids: jobs.iter().filter_map(|(_, r)| r.map(|r| r.id.clone())).collect(),
                l_gen: mean(|l| l.0),
                l_cls: mean(|l| l.1),
                l_total: mean(|l| l.2),
                grad_norm,
            };
            epoch_total += rec.l_total * n;
            log.steps.push(rec);
        }
        log.epochs.push(epoch_total / cases.len() as f64);
    }
    Ok(Trained { model, store, opt, log })
}
