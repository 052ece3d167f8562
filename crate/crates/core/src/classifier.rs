//! Multi-label finding classifier with Noisy-OR pooling over grid cells.
//!
//! A conv stack maps the volume to a coarse grid; a locally connected head
//! gives every cell its own 18 logits. Volume-level probabilities pool the
//! cell probabilities as `1 − Π(1 − σ(z))`, which in log space is
//! `1 − exp(−Σ softplus(z))`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::data::{CaseRecord, Split, Volume, NUM_CLASSES};
use crate::encoder::{feature_grid, ConvStack};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, graph_grads, parallel_accumulate, Adam};

/// Upper clamp on cell and pooled probabilities.
pub const P_MAX: f64 = 1.0 - 1e-7;
const CELL_BIAS: f32 = -6.0;

/// `1 − Π(1 − p_i)`, accumulated as `Σ ln(1 − p_i)` with `p_i ≤ 1 − 1e-7`.
pub fn noisy_or_pool(cell_probs: &[f32]) -> f32 {
    let log_none: f64 = cell_probs
        .iter()
        .map(|&p| (-(p as f64).clamp(0.0, P_MAX)).ln_1p())
        .sum();
    (1.0 - log_none.exp()) as f32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub extents: [usize; 3],
    pub channels: [usize; 3],
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            extents: crate::data::DEFAULT_EXTENTS,
            channels: [8, 16, 32],
            epochs: 6,
            lr: 3e-3,
            batch_size: 8,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub convs: ConvStack,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub cells: usize,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, cfg: &ClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let convs = ConvStack::new(store, &mut rng, "cls", cfg.extents, cfg.channels);
        let cells: usize = feature_grid(cfg.extents).iter().product();
        let c = cfg.channels[2];
        let sd = (1.0 / c as f32).sqrt() * 0.1;
        let head_w = store.add("cls.head.w", Tensor::randn([cells, c, NUM_CLASSES], sd, &mut rng));
        let head_b = store.add("cls.head.b", Tensor::full([cells, 1, NUM_CLASSES], CELL_BIAS));
        Self {
            convs,
            head_w,
            head_b,
            cells,
        }
    }

    /// Per-cell logits `[cells, 18]`.
    pub fn voxel_logits(&self, g: &mut Graph, store: &ParamStore, voxels: &[f32]) -> Result<Var> {
        let c = self.convs.channels[2];
        let maps = self.convs.forward(g, store, voxels)?;
        let flat = g.reshape(maps, &[c, self.cells])?;
        let h = g.transpose(flat)?;
        let h = g.reshape(h, &[self.cells, 1, c])?;
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let z = g.matmul(h, w)?;
        let z = g.add(z, b)?;
        g.reshape(z, &[self.cells, NUM_CLASSES])
    }

    /// Pooled log-space quantities from cell logits: `(log P, log(1 − P))`,
    /// both `[18]`, with `P` clamped to `[1e-7, 1 − 1e-7]`.
    fn pooled_logs(g: &mut Graph, logits: Var) -> Result<(Var, Var)> {
        let sp = g.softplus(logits);
        let s = g.sum_axis(sp, 0)?;
        let max_s = -(1.0 - P_MAX).ln() as f32;
        let s = g.clamp(s, 0.0, max_s);
        let log_none = g.neg(s);
        let none = g.exp(log_none);
        let p = g.neg(none);
        let p = g.add_scalar(p, 1.0);
        let p = g.clamp(p, 1e-7, P_MAX as f32);
        Ok((g.log(p), log_none))
    }

    /// Mean binary cross-entropy of the pooled probabilities.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, voxels: &[f32], labels: &[u8; NUM_CLASSES]) -> Result<Var> {
        let z = self.voxel_logits(g, store, voxels)?;
        let (log_p, log_q) = Self::pooled_logs(g, z)?;
        let y: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        let yv = g.constant(&[NUM_CLASSES], y.clone())?;
        let ny = g.constant(&[NUM_CLASSES], y.iter().map(|v| 1.0 - v).collect())?;
        let a = g.mul(yv, log_p)?;
        let b = g.mul(ny, log_q)?;
        let ll = g.add(a, b)?;
        let m = g.mean(ll);
        Ok(g.neg(m))
    }

    pub fn probabilities(&self, store: &ParamStore, voxels: &[f32]) -> Result<[f32; NUM_CLASSES]> {
        let mut g = Graph::new();
        let z = self.voxel_logits(&mut g, store, voxels)?;
        let z = g.value(z);
        let mut out = [0.0; NUM_CLASSES];
        for (k, o) in out.iter_mut().enumerate() {
            let cells: Vec<f32> = (0..self.cells)
                .map(|i| crate::autograd::sigmoid(z[i * NUM_CLASSES + k]))
                .collect();
            *o = noisy_or_pool(&cells);
        }
        Ok(out)
    }
}

/// Trained classifier whose weights can no longer change.
#[derive(Debug, Clone)]
pub struct FrozenClassifier {
    model: Classifier,
    store: ParamStore,
    config: ClassifierConfig,
}

impl FrozenClassifier {
    pub fn seal(model: Classifier, mut store: ParamStore, config: ClassifierConfig) -> Self {
        store.set_trainable_prefix("", false);
        Self { model, store, config }
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum("cls.")
    }

    /// Sealed weights reject writes.
    pub fn update(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))?;
        let dst = self.store.value_mut(id)?;
        if dst.len() != data.len() {
            return Err(Error::shape("update", &[dst.len()], &[data.len()]));
        }
        dst.copy_from_slice(data);
        Ok(())
    }

    pub fn predict(&self, volume: &Volume) -> Result<[f32; NUM_CLASSES]> {
        self.model.probabilities(&self.store, volume.voxels())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store)
    }

    pub fn load(path: &Path, config: ClassifierConfig) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let mut store = ParamStore::new();
        let model = Classifier::new(&mut store, &config);
        let n = store.load_from(&loaded)?;
        if n != store.len() || loaded.len() != store.len() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("expected {} classifier tensors, matched {n}", store.len()),
            });
        }
        Ok(Self::seal(model, store, config))
    }
}

/// Per-epoch mean training loss.
pub type ClassifierLog = Vec<f64>;

/// Fits the classifier on training cases only.
pub fn train_classifier(cases: &[&CaseRecord], cfg: &ClassifierConfig) -> Result<(FrozenClassifier, ClassifierLog)> {
    if let Some(bad) = cases.iter().find(|c| c.split != Split::Train) {
        return Err(Error::Leakage(format!("classifier training saw {} case {}", bad.split, bad.id)));
    }
    if cases.is_empty() {
        return Err(Error::Invalid("classifier training needs at least one case".into()));
    }
    let mut store = ParamStore::new();
    let model = Classifier::new(&mut store, cfg);
    let mut opt = Adam::new(&store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut log = Vec::new();
    let bs = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(bs) {
            store.zero_grads();
            let losses = parallel_accumulate(&mut store, batch, 1.0 / batch.len() as f32, |s, &i| {
                let c = cases[i];
                let mut g = Graph::new();
                let l = model.loss(&mut g, s, c.volume.voxels(), &c.labels)?;
                g.backward(l)?;
                Ok((g.value(l)[0] as f64, graph_grads(&g, s)))
            })?;
            total += losses.iter().sum::<f64>();
            clip_grad_norm(&mut store, 1.0);
            opt.step(&mut store)?;
        }
        log.push(total / cases.len() as f64);
    }
    Ok((FrozenClassifier::seal(model, store, *cfg), log))
}
