//! Small pre-norm transformer decoder over `[conditioning; report]`.
//!
//! Conditioning positions attend to each other freely; report positions
//! attend to all conditioning positions and to earlier report positions.
//! Only report positions produce logits that enter the loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::data::grammar::{BOS, EOS, PAD};
use crate::dpg::InputSequence;
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_llm: usize,
    pub context: usize,
    pub vocab: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_llm: 64,
            context: 256,
            vocab: crate::data::Vocabulary::get().len(),
        }
    }
}

/// Attention projections that can carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterTarget {
    Q,
    K,
    V,
    O,
}

impl std::str::FromStr for AdapterTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Self::Q),
            "k" => Ok(Self::K),
            "v" => Ok(Self::V),
            "o" => Ok(Self::O),
            _ => Err(Error::Config(format!("unknown adapter target {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm_f: LayerNorm,
    pub head: Linear,
}

/// Additive mask for `total` positions of which the first `prefix_len`
/// form a bidirectional block.
pub fn prefix_lm_mask(prefix_len: usize, total: usize) -> Vec<f32> {
    let mut m = vec![0.0; total * total];
    for i in 0..total {
        for j in 0..total {
            let visible = if i < prefix_len { j < prefix_len } else { j <= i };
            if !visible {
                m[i * total + j] = f32::NEG_INFINITY;
            }
        }
    }
    m
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: DecoderConfig) -> Result<Self> {
        let d = config.d_llm;
        let tok = store.add("dec.tok", Tensor::randn([config.vocab, d], 0.1, rng));
        let pos = store.add("dec.pos", Tensor::randn([config.context, d], 0.02, rng));
        let mut blocks = Vec::new();
        for l in 0..config.layers {
            blocks.push(Block {
                norm1: LayerNorm::new(store, &format!("dec.l{l}.ln1"), d),
                attn: Attention::new(store, rng, &format!("dec.l{l}.attn"), d, config.heads)?,
                norm2: LayerNorm::new(store, &format!("dec.l{l}.ln2"), d),
                ffn: FeedForward::new(store, rng, &format!("dec.l{l}.ffn"), d, 4 * d),
            });
        }
        Ok(Self {
            config,
            tok,
            pos,
            blocks,
            norm_f: LayerNorm::new(store, "dec.ln_f", d),
            head: Linear::new(store, rng, "dec.head", d, config.vocab),
        })
    }

    /// Attaches adapters to the chosen projections of every block and
    /// freezes all other decoder weights.
    pub fn apply_adapters(
        &mut self,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        targets: &[AdapterTarget],
        rank: usize,
        alpha: f32,
    ) -> Result<()> {
        store.set_trainable_prefix("dec.", false);
        for b in &mut self.blocks {
            for t in targets {
                let lin = match t {
                    AdapterTarget::Q => &mut b.attn.q,
                    AdapterTarget::K => &mut b.attn.k,
                    AdapterTarget::V => &mut b.attn.v,
                    AdapterTarget::O => &mut b.attn.o,
                };
                lin.attach_lora(store, rng, rank, alpha)?;
            }
        }
        Ok(())
    }

    pub fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, ids: &[u32]) -> Result<Var> {
        let table = g.param(store, self.tok);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.embedding(table, &idx)
    }

    /// Final hidden states `[T, d]` of a full embedded sequence.
    pub fn hidden(&self, g: &mut Graph, store: &ParamStore, seq: Var, prefix_len: usize) -> Result<Var> {
        let t = g.shape(seq)[0];
        if t > self.config.context {
            return Err(Error::ContextOverflow {
                len: t,
                context: self.config.context,
            });
        }
        let pos = g.param(store, self.pos);
        let pos = g.slice(pos, 0, 0, t)?;
        let mut x = g.add(seq, pos)?;
        let mask = g.constant(&[t, t], prefix_lm_mask(prefix_len, t))?;
        for b in &self.blocks {
            let h = b.norm1.forward(g, store, x)?;
            let a = b.attn.forward(g, store, h, h, Some(mask))?;
            x = g.add(x, a)?;
            let h = b.norm2.forward(g, store, x)?;
            let f = b.ffn.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        self.norm_f.forward(g, store, x)
    }

    /// Logits `[T, V]` for every position of an embedded sequence.
    pub fn forward_embeds(&self, g: &mut Graph, store: &ParamStore, seq: Var, prefix_len: usize) -> Result<Var> {
        let h = self.hidden(g, store, seq, prefix_len)?;
        self.head.forward(g, store, h)
    }

    /// Logits `[L, V]` at the report positions, for teacher-forced input
    /// `report_in` (starting with BOS).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &InputSequence, report_in: &[u32]) -> Result<Var> {
        if report_in.is_empty() {
            return Err(Error::Invalid("empty report input".into()));
        }
        let r = self.embed_tokens(g, store, report_in)?;
        let seq = g.concat(&[input.embeds, r], 0)?;
        let h = self.hidden(g, store, seq, input.len)?;
        let h = g.slice(h, 0, input.len, report_in.len())?;
        self.head.forward(g, store, h)
    }

    /// Greedy decoding after the conditioning embeddings `cond: [P, d]`.
    /// Returns the tokens between BOS and EOS (exclusive).
    pub fn generate(&self, store: &ParamStore, cond: &Tensor, max_len: usize) -> Result<Vec<u32>> {
        let p = cond.shape()[0];
        if p + max_len > self.config.context {
            return Err(Error::ContextOverflow {
                len: p + max_len,
                context: self.config.context,
            });
        }
        let mut tokens = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let mut g = Graph::new();
            let c = g.input(cond.clone());
            let r = self.embed_tokens(&mut g, store, &tokens)?;
            let seq = g.concat(&[c, r], 0)?;
            let h = self.hidden(&mut g, store, seq, p)?;
            let last = g.slice(h, 0, p + tokens.len() - 1, 1)?;
            let logits = self.head.forward(&mut g, store, last)?;
            let next = argmax_lowest(g.value(logits)) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_lowest(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forcing pair for a report: `([BOS, y..], [y.., EOS])`.
pub fn shift_report(report: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = vec![BOS];
    input.extend_from_slice(report);
    let mut target = report.to_vec();
    target.push(EOS);
    (input, target)
}

/// Mean negative log-likelihood over non-PAD targets.
pub fn nll_loss(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape("nll_loss", &shape, &[targets.len()]));
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(Error::Invalid("no non-pad targets".into()));
    }
    let lp = g.log_softmax(logits);
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = g.pick(lp, &idx)?;
    let keep: Vec<f32> = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
    let keep = g.constant(&[targets.len()], keep)?;
    let kept = g.mul(picked, keep)?;
    let total = g.sum(kept);
    Ok(g.scale(total, -1.0 / count as f32))
}
