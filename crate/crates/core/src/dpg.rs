//! Prefix generation from the two deltas, the diagnostic anchor, and
//! assembly of the decoder input `[prefix; I; E; T]`.

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Var};
use crate::data::grammar::{anchor_text, NUM_CLASSES};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::Linear;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Two-layer MLP `2d → 4·d_llm → p·d_llm`, reshaped to `p` prefix tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub hidden: Linear,
    pub out: Linear,
    pub p: usize,
    pub d: usize,
    pub d_llm: usize,
}

impl Projector {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize, d_llm: usize, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Config("prefix length must be at least 1".into()));
        }
        Ok(Self {
            hidden: Linear::new(store, rng, "dpg.fc1", 2 * d, 4 * d_llm),
            out: Linear::new(store, rng, "dpg.fc2", 4 * d_llm, p * d_llm),
            p,
            d,
            d_llm,
        })
    }

    /// `g, l: [1, d]` → `[p, d_llm]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, global: Var, local: Var) -> Result<Var> {
        let (sg, sl) = (g.shape(global).to_vec(), g.shape(local).to_vec());
        if sg != [1, self.d] || sl != [1, self.d] {
            return Err(Error::shape("fuse_and_project", &sg, &sl));
        }
        let x = g.concat(&[global, local], 1)?;
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        let y = self.out.forward(g, store, h)?;
        g.reshape(y, &[self.p, self.d_llm])
    }
}

/// Anchor token ids naming every class with probability at or above
/// `threshold`, in class order.
pub fn anchor_to_prompt(probs: &[f32; NUM_CLASSES], threshold: f32) -> Vec<u32> {
    let present: Vec<usize> = (0..NUM_CLASSES).filter(|&k| probs[k] >= threshold).collect();
    Vocabulary::get()
        .encode(&anchor_text(&present))
        .expect("anchor words are in the vocabulary")
}

/// Decoder conditioning sequence with the start offsets of its four
/// segments: prefix, visual tokens, anchor, instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSequence {
    pub embeds: Var,
    pub boundaries: [usize; 4],
    pub len: usize,
}

impl InputSequence {
    /// `(start, len)` of segment `k` (0 prefix, 1 visual, 2 anchor, 3 instruction).
    pub fn segment(&self, k: usize) -> (usize, usize) {
        let start = self.boundaries[k];
        let end = if k + 1 < 4 { self.boundaries[k + 1] } else { self.len };
        (start, end - start)
    }
}

/// Concatenates the present segments along the token axis. All parts are
/// `[*, d_llm]`.
pub fn build_input(
    g: &mut Graph,
    prefix: Option<Var>,
    visual: Var,
    anchor: Option<Var>,
    instruction: Var,
) -> Result<InputSequence> {
    let rows = |g: &Graph, v: Option<Var>| v.map_or(0, |v| g.shape(v)[0]);
    let p = rows(g, prefix);
    let n = g.shape(visual)[0];
    let e = rows(g, anchor);
    let t = g.shape(instruction)[0];
    let parts: Vec<Var> = [prefix, Some(visual), anchor, Some(instruction)]
        .into_iter()
        .flatten()
        .collect();
    let embeds = g.concat(&parts, 0)?;
    Ok(InputSequence {
        embeds,
        boundaries: [0, p, p + n, p + n + e],
        len: p + n + e + t,
    })
}
