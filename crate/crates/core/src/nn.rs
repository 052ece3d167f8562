//! Layers shared by every model component. Each layer stores [`ParamId`]s
//! into a [`ParamStore`] and is applied to a single sample on a [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Low-rank factors attached to a [`Linear`]: `y += (alpha / r) · x A B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f32,
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<Lora>,
    name: String,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let sd = (1.0 / d_in as f32).sqrt();
        Self::with_init(store, rng, name, d_in, d_out, sd, 0.0)
    }

    pub fn with_init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight_sd: f32,
        bias: f32,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::randn([d_in, d_out], weight_sd, rng));
        let b = store.add(format!("{name}.b"), Tensor::full([d_out], bias));
        Self {
            w,
            b,
            d_in,
            d_out,
            lora: None,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Adds adapter factors: `A` Gaussian, `B` zero, so the layer output is
    /// unchanged until `B` is trained.
    pub fn attach_lora(&mut self, store: &mut ParamStore, rng: &mut impl Rng, rank: usize, alpha: f32) -> Result<()> {
        if rank == 0 {
            return Err(Error::Invalid("adapter rank must be at least 1".into()));
        }
        if self.lora.is_some() {
            return Err(Error::Invalid(format!("{} already has an adapter", self.name)));
        }
        let sd = (1.0 / self.d_in as f32).sqrt();
        let a = store.add(format!("{}.lora_a", self.name), Tensor::randn([self.d_in, rank], sd, rng));
        let b = store.add(format!("{}.lora_b", self.name), Tensor::zeros([rank, self.d_out]));
        self.lora = Some(Lora { a, b, rank, alpha });
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        let mut y = g.add(xw, b)?;
        if let Some(l) = self.lora {
            let a = g.param(store, l.a);
            let bb = g.param(store, l.b);
            let xa = g.matmul(x, a)?;
            let xab = g.matmul(xa, bb)?;
            let scaled = g.scale(xab, l.alpha / l.rank as f32);
            y = g.add(y, scaled)?;
        }
        Ok(y)
    }
}

/// Layer norm over the last axis with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Tensor::full([d], 1.0)),
            shift: store.add(format!("{name}.b"), Tensor::zeros([d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let shift = g.param(store, self.shift);
        let y = g.mul(n, gain)?;
        g.add(y, shift)
    }
}

/// Multi-head attention between a query sequence `[tq, d]` and a
/// key/value sequence `[tk, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
            d,
        })
    }

    /// `mask`, when given, is an additive `[tq, tk]` constant (0 or `-inf`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xq: Var, xkv: Var, mask: Option<Var>) -> Result<Var> {
        let (h, dh) = (self.heads, self.d / self.heads);
        let tq = g.shape(xq)[0];
        let tk = g.shape(xkv)[0];
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let q = g.reshape(q, &[tq, h, dh])?;
        let q = g.permute(q, &[1, 0, 2])?;
        let k = g.reshape(k, &[tk, h, dh])?;
        let kt = g.permute(k, &[1, 2, 0])?;
        let v = g.reshape(v, &[tk, h, dh])?;
        let v = g.permute(v, &[1, 0, 2])?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[tq, self.d])?;
        self.o.forward(g, store, ctx)
    }
}

/// Two-layer perceptron `d → hidden → d` with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Binary cross-entropy with logits, averaged: `mean(softplus(z) − y·z)`.
pub fn bce_with_logits(g: &mut Graph, logits: Var, targets: &[f32]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let y = g.constant(&shape, targets.to_vec())?;
    let sp = g.softplus(logits);
    let yz = g.mul(y, logits)?;
    let per = g.sub(sp, yz)?;
    Ok(g.mean(per))
}
