//! Difference extraction between target and reference latent tokens.
//!
//! The global delta runs one transformer encoder layer over
//! `[δ; I; I_ref]` and reads the output at the `δ` slot. The local delta is
//! parameter-free: residuals `I_i − I_ref_i` weighted by their share of the
//! total squared distance.

use rand::Rng;
use serde::Serialize;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm};

/// Guard added to the total squared distance.
pub const EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDiff {
    pub query: ParamId,
    pub pos: ParamId,
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub n: usize,
    pub d: usize,
}

impl GlobalDiff {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, n: usize, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            query: store.add("hde.delta", Tensor::randn([1, d], 1.0, rng)),
            pos: store.add("hde.pos", Tensor::randn([2 * n + 1, d], 0.02, rng)),
            attn: Attention::new(store, rng, "hde.attn", d, heads)?,
            norm1: LayerNorm::new(store, "hde.ln1", d),
            ffn: FeedForward::new(store, rng, "hde.ffn", d, 4 * d),
            norm2: LayerNorm::new(store, "hde.ln2", d),
            n,
            d,
        })
    }

    /// `[n, d] × [n, d]` → `[1, d]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, i: Var, i_ref: Var) -> Result<Var> {
        let (si, sr) = (g.shape(i).to_vec(), g.shape(i_ref).to_vec());
        if si != sr || si != [self.n, self.d] {
            return Err(Error::shape("global_delta", &si, &sr));
        }
        let q = g.param(store, self.query);
        let x = g.concat(&[q, i, i_ref], 0)?;
        let pos = g.param(store, self.pos);
        let x = g.add(x, pos)?;
        let a = self.attn.forward(g, store, x, x, None)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, store, h)?;
        let m = self.ffn.forward(g, store, h)?;
        let h2 = g.add(h, m)?;
        let out = self.norm2.forward(g, store, h2)?;
        g.slice(out, 0, 0, 1)
    }
}

/// The local operator as a value; it owns no weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LocalDiff;

impl LocalDiff {
    pub fn parameters(&self) -> &'static [ParamId] {
        &[]
    }

    /// Differentiable `[n, d] × [n, d]` → `[1, d]`.
    pub fn forward(&self, g: &mut Graph, i: Var, i_ref: Var) -> Result<Var> {
        let (si, sr) = (g.shape(i).to_vec(), g.shape(i_ref).to_vec());
        if si != sr || si.len() != 2 {
            return Err(Error::shape("local_delta", &si, &sr));
        }
        let n = si[0];
        let r = g.sub(i, i_ref)?;
        let s = g.sq_l2(r);
        let total = g.sum(s);
        let total = g.add_scalar(total, EPS);
        let w = g.div(s, total)?;
        let w = g.reshape(w, &[n, 1])?;
        let wr = g.mul(w, r)?;
        let sum = g.sum_axis(wr, 0)?;
        g.reshape(sum, &[1, si[1]])
    }
}

fn check_pair(i: &[f32], i_ref: &[f32], d: usize) -> Result<usize> {
    if i.len() != i_ref.len() || d == 0 || i.len() % d != 0 {
        return Err(Error::shape("latent pair", &[i.len()], &[i_ref.len(), d]));
    }
    Ok(i.len() / d)
}

/// `S_j = ‖I_j − I_ref_j‖²` for each of the `n` rows of width `d`.
pub fn importance_scores(i: &[f32], i_ref: &[f32], d: usize) -> Result<Vec<f32>> {
    check_pair(i, i_ref, d)?;
    Ok(i.chunks(d)
        .zip(i_ref.chunks(d))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect())
}

/// `w_j = S_j / (Σ S + ε)`, evaluated in f64 and rounded toward zero so
/// the weights never sum past 1.
pub fn local_weights(i: &[f32], i_ref: &[f32], d: usize) -> Result<Vec<f32>> {
    let s = importance_scores(i, i_ref, d)?;
    let total = s.iter().map(|&v| v as f64).sum::<f64>() + EPS as f64;
    Ok(s.iter()
        .map(|&v| {
            let w = v as f64 / total;
            let r = w as f32;
            if r as f64 > w {
                r.next_down()
            } else {
                r
            }
        })
        .collect())
}

/// `Σ_j w_j (I_j − I_ref_j)`, a `d`-vector.
pub fn local_delta(i: &[f32], i_ref: &[f32], d: usize) -> Result<Vec<f32>> {
    let w = local_weights(i, i_ref, d)?;
    let mut out = vec![0.0; d];
    for ((a, b), wj) in i.chunks(d).zip(i_ref.chunks(d)).zip(&w) {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o += wj * (x - y);
        }
    }
    Ok(out)
}

/// Per-case export record for difference-map analyses.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffMapRecord {
    pub case_id: String,
    pub reference_id: String,
    pub scores: Vec<f32>,
    pub weights: Vec<f32>,
}

impl DiffMapRecord {
    pub fn new(case_id: &str, reference_id: &str, i: &[f32], i_ref: &[f32], d: usize) -> Result<Self> {
        Ok(Self {
            case_id: case_id.to_string(),
            reference_id: reference_id.to_string(),
            scores: importance_scores(i, i_ref, d)?,
            weights: local_weights(i, i_ref, d)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn two_token_weights() {
        // squared distances 1 and 9
        let i = [1.0, 0.0, 3.0, 0.0];
        let r = [0.0; 4];
        let w = local_weights(&i, &r, 2).unwrap();
        let k = 10.0 / (10.0 + 1e-5);
        assert!((w[0] - 0.1 * k).abs() < 1e-6);
        assert!((w[1] - 0.9 * k).abs() < 1e-6);
    }

    #[test]
    fn graph_and_slice_versions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::randn([5, 4], 1.0, &mut rng);
        let b = Tensor::randn([5, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let out = LocalDiff.forward(&mut g, va, vb).unwrap();
        let direct = local_delta(a.data(), b.data(), 4).unwrap();
        for (x, y) in g.value(out).iter().zip(&direct) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(g.bound_params().count(), 0);
    }

    #[test]
    fn global_delta_shape_and_order_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let gd = GlobalDiff::new(&mut store, &mut rng, 6, 8, 4).unwrap();
        let a = Tensor::randn([6, 8], 1.0, &mut rng);
        let b = Tensor::randn([6, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a), g.input(b));
        let ab = gd.forward(&mut g, &store, va, vb).unwrap();
        let ba = gd.forward(&mut g, &store, vb, va).unwrap();
        assert_eq!(g.shape(ab), &[1, 8]);
        assert_ne!(g.value(ab), g.value(ba));
    }
}
