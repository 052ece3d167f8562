//! Volume encoder and the shared-query resampler.
//!
//! The encoder is three stride-2-ish 3-D conv blocks (kernel 3, padding 1)
//! whose output grid is flattened into voxel tokens `[v, c]`. The resampler
//! cross-attends a learned query set `L: [n, d]` to those tokens, so every
//! volume ends up as exactly `n` latent tokens regardless of `v`.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};

pub const STRIDES: [[usize; 3]; 3] = [[2, 2, 2], [1, 2, 2], [2, 2, 2]];
const KERNEL: usize = 3;
const PAD: usize = 1;
/// Fixed input standardisation applied before the first conv.
pub const INPUT_CENTER: f32 = 0.35;
pub const INPUT_SCALE: f32 = 10.0;

/// Output grid of the conv stack for a volume of `extents`.
pub fn feature_grid(extents: [usize; 3]) -> [usize; 3] {
    let mut e = extents;
    for s in STRIDES {
        for i in 0..3 {
            e[i] = (e[i] + 2 * PAD - KERNEL) / s[i] + 1;
        }
    }
    e
}

/// Three conv + relu blocks following [`STRIDES`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<(ParamId, ParamId)>,
    pub channels: [usize; 3],
    pub extents: [usize; 3],
}

impl ConvStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, extents: [usize; 3], channels: [usize; 3]) -> Self {
        let mut cin = 1;
        let mut layers = Vec::new();
        for (i, &cout) in channels.iter().enumerate() {
            let sd = (2.0 / (cin * KERNEL.pow(3)) as f32).sqrt();
            let w = store.add(
                format!("{name}.conv{}.w", i + 1),
                Tensor::randn([cout, cin, KERNEL, KERNEL, KERNEL], sd, rng),
            );
            let b = store.add(format!("{name}.conv{}.b", i + 1), Tensor::zeros([cout]));
            layers.push((w, b));
            cin = cout;
        }
        Self {
            layers,
            channels,
            extents,
        }
    }

    /// `voxels` (one volume, row-major) → `[1, c, gz, gy, gx]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, voxels: &[f32]) -> Result<Var> {
        let [s, h, w] = self.extents;
        if voxels.len() != s * h * w {
            return Err(Error::shape("encode", &self.extents, &[voxels.len()]));
        }
        let scaled = voxels.iter().map(|v| (v - INPUT_CENTER) * INPUT_SCALE).collect();
        let mut x = g.constant(&[1, 1, s, h, w], scaled)?;
        for (&(wid, bid), stride) in self.layers.iter().zip(STRIDES) {
            let wv = g.param(store, wid);
            let bv = g.param(store, bid);
            let y = g.conv3d(x, wv, bv, stride, PAD)?;
            x = g.relu(y);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub convs: ConvStack,
    pub pos: ParamId,
    pub tokens: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, extents: [usize; 3], channels: [usize; 3]) -> Self {
        let convs = ConvStack::new(store, rng, "enc", extents, channels);
        let tokens: usize = feature_grid(extents).iter().product();
        let pos = store.add("enc.pos", Tensor::randn([tokens, channels[2]], 0.02, rng));
        Self { convs, pos, tokens }
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.channels[2]
    }

    /// Voxel tokens `F: [v, c]` with learned positions added.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, voxels: &[f32]) -> Result<Var> {
        let c = self.feature_dim();
        let maps = self.convs.forward(g, store, voxels)?;
        let flat = g.reshape(maps, &[c, self.tokens])?;
        let tokens = g.transpose(flat)?;
        let pos = g.param(store, self.pos);
        g.add(tokens, pos)
    }
}

/// One post-norm cross-attention block with a feed-forward layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub input: Linear,
    pub queries: ParamId,
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
    pub n: usize,
    pub d: usize,
}

impl Resampler {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, c: usize, n: usize, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            input: Linear::new(store, rng, "rs.in", c, d),
            queries: store.add("rs.queries", Tensor::randn([n, d], 1.0, rng)),
            attn: Attention::new(store, rng, "rs.attn", d, heads)?,
            norm1: LayerNorm::new(store, "rs.ln1", d),
            ffn: FeedForward::new(store, rng, "rs.ffn", d, 4 * d),
            norm2: LayerNorm::new(store, "rs.ln2", d),
            n,
            d,
        })
    }

    /// `F: [v, c]` → latent tokens `[n, d]`. Target and reference calls on
    /// one graph bind the same query node.
    pub fn resample(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let kv = self.input.forward(g, store, f)?;
        let q = g.param(store, self.queries);
        let a = self.attn.forward(g, store, q, kv, None)?;
        let h = g.add(q, a)?;
        let h = self.norm1.forward(g, store, h)?;
        let m = self.ffn.forward(g, store, h)?;
        let h2 = g.add(h, m)?;
        self.norm2.forward(g, store, h2)
    }
}
