//! Central-difference gradient checks, shared by the autodiff tests and the
//! acceptance run.

use diffvp::autograd::{gradient_pair, max_relative_error, Graph, ParamStore, Tensor, Var};
use diffvp::data::{generate_case_with, Split, SynthParams};
use diffvp::decoder::DecoderConfig;
use diffvp::dpg::anchor_to_prompt;
use diffvp::model::{Flags, Generator, ModelConfig};
use diffvp::optim::graph_grads;
use diffvp::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f32 = 1e-3;
pub const PRIMITIVE_TOL: f32 = 1e-3;
pub const MODEL_TOL: f32 = 1e-2;
const POINTS: u64 = 5;

/// Worst relative error of one primitive over its points.
#[derive(Debug)]
pub struct Check {
    pub name: String,
    pub error: f32,
    pub detail: String,
}

pub fn primitives() -> Vec<Check> {
    [
        elementwise_unary(),
        elementwise_binary_with_broadcast(),
        matmul_plain_and_batched(),
        layout_ops(),
        reductions_and_normalisers(),
        masked_softmax_rows(),
        conv3d_input_weight_and_bias(),
    ]
    .into_iter()
    .flatten()
    .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values in ±[0.2, 1.2], nudged at least 0.05 away from every `kink`.
fn signed_avoiding(n: usize, seed: u64, kinks: &[f32]) -> Vec<f32> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let m: f32 = r.gen_range(0.2..1.2);
            let mut v = if r.gen_bool(0.5) { m } else { -m };
            while kinks.iter().any(|k| (v - k).abs() < 0.05) {
                v += 0.1;
            }
            v
        })
        .collect()
}

fn signed(n: usize, seed: u64) -> Vec<f32> {
    signed_avoiding(n, seed, &[])
}

fn positive(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(0.5..2.0)).collect()
}

/// Weights of the scalar the check differentiates.
#[derive(Clone, Copy)]
enum Upstream {
    Positive,
    /// 1 on every third output, 0 elsewhere.
    Selector,
    /// +1 on even outputs, -1 on odd ones.
    Alternating,
    /// Per row of a normalised output `ŷ`: `g + α·1 + β·ŷ` with `g ⊥ {1, ŷ}`
    /// and every `|g_i|` large, so the input gradient `g / σ` has no small
    /// coordinate while the backward must still project out `α` and `β`.
    Projected,
}

fn projected_weights(y: &[f32], row: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(y.len());
    for yh in y.chunks(row) {
        let yy: f32 = yh.iter().map(|v| v * v).sum();
        let g = (0..1000)
            .map(|_| {
                let s: Vec<f32> = (0..row).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
                let mean = s.iter().sum::<f32>() / row as f32;
                let along = s.iter().zip(yh).map(|(a, b)| a * b).sum::<f32>() / yy;
                s.iter().zip(yh).map(|(v, h)| v - mean - along * h).collect::<Vec<f32>>()
            })
            .find(|g| {
                let max = g.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                max > 0.5 && g.iter().all(|v| v.abs() >= 0.3 * max)
            })
            .expect("well-spread projected weights");
        let (alpha, beta): (f32, f32) = (r.gen_range(0.5..1.0), r.gen_range(0.5..1.0));
        out.extend(g.iter().zip(yh).map(|(g, h)| g + alpha + beta * h));
    }
    out
}

/// Checks `op` at [`POINTS`] random points through the centred scalar
/// `Σ w ⊙ (op(x) − op(x0))`, so the loss is near zero where it is
/// evaluated and f32 rounding of the sum stays far below the step.
fn check<P, F>(out: &mut Vec<Check>, name: &str, shape: &[usize], points: P, upstream: Upstream, op: F)
where
    P: Fn(u64) -> Vec<f32>,
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut worst = Check {
        name: name.to_string(),
        error: 0.0,
        detail: String::new(),
    };
    for seed in 0..POINTS {
        let point = Tensor::new(shape.to_vec(), points(seed)).unwrap();
        let mut g = Graph::new();
        let x = g.input(point.clone());
        let y0 = op(&mut g, x).unwrap();
        let (y_shape, y_val) = (g.shape(y0).to_vec(), g.value(y0).to_vec());
        let w: Vec<f32> = match upstream {
            Upstream::Positive => positive(y_val.len(), 99 + seed),
            Upstream::Selector => (0..y_val.len()).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
            Upstream::Alternating => (0..y_val.len()).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            Upstream::Projected => projected_weights(&y_val, *y_shape.last().unwrap(), 99 + seed),
        };
        let f = |g: &mut Graph, x: Var| -> Result<Var> {
            let y = op(g, x)?;
            let c = g.constant(&y_shape, y_val.clone())?;
            let wv = g.constant(&y_shape, w.clone())?;
            let d = g.sub(y, c)?;
            let wd = g.mul(d, wv)?;
            Ok(g.sum(wd))
        };
        let (analytic, numeric) = gradient_pair(f, &point, STEP).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        if err >= worst.error {
            let (i, a, n) = analytic
                .iter()
                .zip(&numeric)
                .enumerate()
                .map(|(i, (a, n))| (i, *a, *n))
                .max_by(|x, y| ((x.1 - x.2).abs() / (x.1.abs() + 1e-8)).total_cmp(&((y.1 - y.2).abs() / (y.1.abs() + 1e-8))))
                .unwrap();
            worst.error = err;
            worst.detail = format!("point {seed}, coordinate {i}: analytic {a}, numeric {n}");
        }
    }
    out.push(worst);
}

pub fn elementwise_unary() -> Vec<Check> {
    let mut out = Vec::new();
    let up = Upstream::Positive;
    let sh = &[3, 4];
    check(&mut out, "neg", sh, |s| signed(12, s), up, |g, x| Ok(g.neg(x)));
    check(&mut out, "scale", sh, |s| signed(12, s), up, |g, x| Ok(g.scale(x, -1.7)));
    check(&mut out, "add_scalar", sh, |s| signed(12, s), up, |g, x| Ok(g.add_scalar(x, 0.3)));
    check(&mut out, "relu", sh, |s| signed(12, s), up, |g, x| Ok(g.relu(x)));
    // gelu' vanishes near x = -0.75
    check(&mut out, "gelu", sh, |s| signed_avoiding(12, s, &[-0.85, -0.75, -0.65]), up, |g, x| Ok(g.gelu(x)));
    check(&mut out, "sigmoid", sh, |s| signed(12, s), up, |g, x| Ok(g.sigmoid(x)));
    check(&mut out, "softplus", sh, |s| signed(12, s), up, |g, x| Ok(g.softplus(x)));
    check(&mut out, "exp", sh, |s| signed(12, s), up, |g, x| Ok(g.exp(x)));
    check(&mut out, "clamp", sh, |s| signed_avoiding(12, s, &[-0.5, 0.5]), up, |g, x| Ok(g.clamp(x, -0.5, 0.5)));
    check(&mut out, "log", sh, |s| positive(12, s), up, |g, x| Ok(g.log(x)));
    out
}

/// `x` holds both operands: the first `na` values are `a`.
fn split(g: &mut Graph, x: Var, na: usize, a_shape: &[usize], b_shape: &[usize]) -> Result<(Var, Var)> {
    let total = g.shape(x)[0];
    let a = g.slice(x, 0, 0, na)?;
    let b = g.slice(x, 0, na, total - na)?;
    Ok((g.reshape(a, a_shape)?, g.reshape(b, b_shape)?))
}

pub fn elementwise_binary_with_broadcast() -> Vec<Check> {
    let mut out = Vec::new();
    let points = |s: u64| {
        let mut v = signed(6, s);
        v.extend(positive(3, s + 100));
        v
    };
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        check(&mut out, name, &[9], points, Upstream::Positive, move |g, x| {
            let (a, b) = split(g, x, 6, &[2, 3], &[3])?;
            match op {
                0 => g.add(a, b),
                1 => g.sub(a, b),
                2 => g.mul(a, b),
                _ => g.div(a, b),
            }
        });
    }
    out
}

// Bilinear ops use positive operands so no gradient coordinate cancels
// to near zero, where f32 differences cannot resolve a relative error.
pub fn matmul_plain_and_batched() -> Vec<Check> {
    let mut out = Vec::new();
    let up = Upstream::Positive;
    check(&mut out, "matmul", &[18], |s| positive(18, s), up, |g, x| {
        let (a, b) = split(g, x, 6, &[2, 3], &[3, 4])?;
        g.matmul(a, b)
    });
    check(&mut out, "matmul_batched", &[36], |s| positive(36, s), up, |g, x| {
        let (a, b) = split(g, x, 12, &[2, 2, 3], &[2, 3, 4])?;
        g.matmul(a, b)
    });
    check(&mut out, "matmul_shared_rhs", &[24], |s| positive(24, s), up, |g, x| {
        let (a, b) = split(g, x, 12, &[2, 2, 3], &[3, 4])?;
        g.matmul(a, b)
    });
    out
}

pub fn layout_ops() -> Vec<Check> {
    let mut out = Vec::new();
    let up = Upstream::Positive;
    let pts = |s| signed(24, s);
    check(&mut out, "transpose", &[4, 6], pts, up, |g, x| g.transpose(x));
    check(&mut out, "permute", &[2, 3, 4], pts, up, |g, x| g.permute(x, &[2, 0, 1]));
    check(&mut out, "reshape", &[4, 6], pts, up, |g, x| g.reshape(x, &[3, 8]));
    check(&mut out, "slice", &[4, 6], pts, up, |g, x| g.slice(x, 1, 2, 3));
    check(&mut out, "concat", &[4, 6], pts, up, |g, x| {
        let a = g.slice(x, 0, 0, 1)?;
        let b = g.slice(x, 0, 1, 3)?;
        let s = g.scale(a, 2.0);
        g.concat(&[b, s, a], 0)
    });
    check(&mut out, "embedding", &[4, 6], pts, up, |g, x| g.embedding(x, &[3, 0, 3, 1]));
    check(&mut out, "pick", &[4, 6], pts, up, |g, x| g.pick(x, &[5, 0, 2, 2]));
    out
}

pub fn reductions_and_normalisers() -> Vec<Check> {
    let mut out = Vec::new();
    let up = Upstream::Positive;
    let pts = |s| signed(24, s);
    check(&mut out, "sum", &[4, 6], pts, up, |g, x| Ok(g.sum(x)));
    check(&mut out, "mean", &[4, 6], pts, up, |g, x| Ok(g.mean(x)));
    check(&mut out, "sum_axis0", &[4, 6], pts, up, |g, x| g.sum_axis(x, 0));
    check(&mut out, "mean_axis1", &[4, 6], pts, up, |g, x| g.mean_axis(x, 1));
    check(&mut out, "sq_l2", &[4, 6], pts, up, |g, x| Ok(g.sq_l2(x)));
    // gradients scale as 1/σ of the row while f32 noise of the unit-scale
    // output does not, so rows get a smaller spread
    let narrow = |s| signed(24, s).iter().map(|v| v * 0.3).collect();
    check(&mut out, "layer_norm", &[4, 6], narrow, Upstream::Projected, |g, x| Ok(g.layer_norm(x)));
    // ∂/∂z_i = s_i (w_i − Σ w s): narrow rows keep every s_i near 1/6 and
    // alternating weights keep w_i − Σ w s near ±1
    check(&mut out, "softmax", &[4, 6], narrow, Upstream::Alternating, |g, x| Ok(g.softmax(x)));
    check(&mut out, "log_softmax", &[4, 6], narrow, Upstream::Alternating, |g, x| Ok(g.log_softmax(x)));
    out
}

pub fn masked_softmax_rows() -> Vec<Check> {
    let mut out = Vec::new();
    check(&mut out, "masked_softmax", &[3, 3], |s| signed(9, s), Upstream::Selector, |g, x| {
        let mask = diffvp::decoder::prefix_lm_mask(1, 3);
        let m = g.constant(&[3, 3], mask)?;
        let z = g.add(x, m)?;
        Ok(g.softmax(z))
    });
    out
}

pub fn conv3d_input_weight_and_bias() -> Vec<Check> {
    let mut out = Vec::new();
    // x: [1, 2, 3, 4, 4], w: [3, 2, 3, 3, 3], b: [3]
    let (nx, nw) = (2 * 3 * 4 * 4, 3 * 2 * 27);
    let points = |s: u64| {
        // outputs near unit scale keep their f32 rounding below the step
        let mut v: Vec<f32> = positive(nx, s).iter().map(|x| x * 0.2).collect();
        v.extend(positive(nw, s + 100).iter().map(|w| w * 0.1));
        v.extend(signed(3, s + 200));
        v
    };
    for (stride, pad) in [([1, 1, 1], 1), ([2, 2, 2], 1), ([1, 2, 2], 0)] {
        check(&mut out, "conv3d", &[nx + nw + 3], points, Upstream::Positive, move |g, x| {
            let xs = g.slice(x, 0, 0, nx)?;
            let ws = g.slice(x, 0, nx, nw)?;
            let bs = g.slice(x, 0, nx + nw, 3)?;
            let xs = g.reshape(xs, &[1, 2, 3, 4, 4])?;
            let ws = g.reshape(ws, &[3, 2, 3, 3, 3])?;
            g.conv3d(xs, ws, bs, stride, pad)
        });
    }
    out
}

fn small_model() -> ModelConfig {
    ModelConfig {
        extents: [8, 16, 16],
        enc_channels: [2, 3, 4],
        n_latent: 4,
        d: 8,
        heads: 2,
        prefix_len: 2,
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            d_llm: 8,
            context: 160,
            ..DecoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Directional derivatives of the full-model loss: for random ±1
/// directions `v`, `(L(θ + h v) − L(θ − h v)) / 2h` against `∇L · v`.
pub fn composed_model_error() -> f32 {
    let cfg = small_model();
    let mut store = ParamStore::new();
    let model = Generator::new(&mut store, cfg.clone()).unwrap();
    let params = SynthParams {
        extents: cfg.extents,
        noise_sd: 0.02,
    };
    let case = generate_case_with(&params, "t".into(), Split::Train, 3, &[2, 9]).unwrap();
    let reference = generate_case_with(&params, "r".into(), Split::Train, 4, &[]).unwrap();
    let mut probs = [0.0; 18];
    probs[2] = 0.9;
    let anchor = anchor_to_prompt(&probs, 0.5);
    let report = &case.report[..12];

    let loss_at = |s: &ParamStore, flags: &Flags| -> Result<(f32, Vec<(diffvp::autograd::ParamId, Vec<f32>)>)> {
        let mut g = Graph::new();
        let l = model.losses(
            &mut g,
            s,
            flags,
            case.volume.voxels(),
            Some(reference.volume.voxels()),
            &anchor,
            report,
            &case.labels,
        )?;
        g.backward(l.total)?;
        Ok((g.value(l.total)[0], graph_grads(&g, s)))
    };

    let mut worst = 0.0f32;
    for name in ["full", "pixel-diff"] {
        let flags = Flags::variant(name).unwrap();
        let (_, grads) = loss_at(&store, &flags).unwrap();
        let mut r = rng(17);
        for _ in 0..3 {
            let dirs: Vec<Vec<f32>> = store
                .iter()
                .map(|(_, p)| (0..p.numel()).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect())
                .collect();
            let analytic: f64 = grads
                .iter()
                .map(|(id, gv)| gv.iter().zip(&dirs[id.index()]).map(|(a, b)| (a * b) as f64).sum::<f64>())
                .sum();
            let shifted = |sign: f32| -> f32 {
                let mut s = store.clone();
                for (i, id) in store.ids().enumerate() {
                    let vals: Vec<f32> = s.get(id).value().iter().zip(&dirs[i]).map(|(p, d)| p + sign * STEP * d).collect();
                    s.set_value(id, vals).unwrap();
                }
                loss_at(&s, &flags).unwrap().0
            };
            let numeric = ((shifted(1.0) - shifted(-1.0)) / (2.0 * STEP)) as f64;
            let err = ((analytic - numeric).abs() / (analytic.abs() + 1e-8)) as f32;
            worst = worst.max(err);
        }
    }
    worst
}

/// Largest |row sum| of the softmax input gradient.
pub fn softmax_shift_residual() -> f32 {
    let mut worst = 0.0f32;
    for seed in 0..POINTS {
        let z: Vec<f32> = signed(40, seed).iter().map(|v| v * 3.0).collect();
        let w = signed(40, seed + 50);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![5, 8], z).unwrap().with_requires_grad(true));
        let s = g.softmax(x);
        let wv = g.constant(&[5, 8], w).unwrap();
        let sw = g.mul(s, wv).unwrap();
        let loss = g.sum(sw);
        g.backward(loss).unwrap();
        for row in g.grad(x).unwrap().chunks(8) {
            worst = worst.max(row.iter().sum::<f32>().abs());
        }
    }
    worst
}
