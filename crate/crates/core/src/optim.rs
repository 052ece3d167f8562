//! Adam, global-norm clipping, and deterministic data-parallel gradients.

use rayon::prelude::*;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// One bias-corrected Adam update of `param` in place; `t` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + eps);
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        Self {
            lr,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Moment estimates as a checkpointable store (`m.<name>`, `v.<name>`).
    pub fn state(&self, store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (id, p) in store.iter() {
            let i = id.index();
            out.add(format!("m.{}", p.name()), Tensor::new(p.shape().to_vec(), self.m[i].clone()).expect("moment shape"));
            out.add(format!("v.{}", p.name()), Tensor::new(p.shape().to_vec(), self.v[i].clone()).expect("moment shape"));
        }
        out
    }

    /// Rebuilds an optimiser at step `t` from [`Adam::state`] output.
    pub fn restore(store: &ParamStore, lr: f32, t: u64, state: &ParamStore) -> Result<Self> {
        let mut opt = Self::new(store, lr);
        opt.t = t;
        for (id, p) in store.iter() {
            let i = id.index();
            for (prefix, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let key = format!("{prefix}.{}", p.name());
                let src = state
                    .id(&key)
                    .map(|sid| state.get(sid))
                    .ok_or_else(|| Error::Missing(format!("optimiser state {key}")))?;
                if src.shape() != p.shape() {
                    return Err(Error::shape("adam_restore", p.shape(), src.shape()));
                }
                dst.copy_from_slice(src.value());
            }
        }
        Ok(opt)
    }

    /// Applies one update to every trainable parameter from its stored
    /// gradient. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable() {
                continue;
            }
            let i = id.index();
            let (value, grad) = store.value_and_grad_mut(id)?;
            adam_update(value, grad, &mut self.m[i], &mut self.v[i], self.t, self.lr, BETA1, BETA2, ADAM_EPS);
        }
        Ok(())
    }
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        store.scale_grads((max_norm / norm) as f32);
    }
    norm
}

/// Gradients of one sample's graph, keyed by parameter.
pub type SampleGrads = Vec<(ParamId, Vec<f32>)>;

pub fn graph_grads(g: &Graph, store: &ParamStore) -> SampleGrads {
    let mut out: SampleGrads = store
        .ids()
        .filter_map(|id| {
            let var = g.bound_param(id)?;
            let grad = g.grad(var)?;
            Some((id, grad.to_vec()))
        })
        .collect();
    out.sort_by_key(|(id, _)| *id);
    out
}

/// Runs `f` for every item on the worker pool, then adds the returned
/// gradients (scaled by `scale`) into `store` in item order, so the sum does
/// not depend on scheduling. Returns the per-item results.
pub fn parallel_accumulate<T, R, F>(store: &mut ParamStore, items: &[T], scale: f32, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&ParamStore, &T) -> Result<(R, SampleGrads)> + Sync,
{
    let shared: &ParamStore = store;
    let results: Vec<(R, SampleGrads)> = items.par_iter().map(|it| f(shared, it)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(results.len());
    for (r, grads) in results {
        for (id, gv) in grads {
            if store.get(id).trainable() {
                store.grad_mut(id).iter_mut().zip(&gv).for_each(|(a, b)| *a += scale * b);
            }
        }
        out.push(r);
    }
    Ok(out)
}
