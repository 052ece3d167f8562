//! The report generator: encoder, resampler, difference extractor, prefix
//! generator, decoder, and the auxiliary finding head, wired per
//! [`Flags`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{checkpoint, Graph, ParamStore, Tensor, Var};
use crate::data::grammar::{instruction_tokens, NUM_CLASSES};
use crate::data::DEFAULT_EXTENTS;
use crate::decoder::{nll_loss, shift_report, AdapterTarget, Decoder, DecoderConfig};
use crate::dpg::{build_input, InputSequence, Projector};
use crate::encoder::{Encoder, Resampler};
use crate::error::{Error, Result};
use crate::hde::{GlobalDiff, LocalDiff};
use crate::nn::{bce_with_logits, Linear};

/// Which conditioning paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub use_global: bool,
    pub use_local: bool,
    pub use_e: bool,
    pub use_prefix: bool,
    pub pixel_diff: bool,
}

impl Flags {
    pub const FULL: Flags = Flags {
        use_global: true,
        use_local: true,
        use_e: true,
        use_prefix: true,
        pixel_diff: false,
    };

    /// Named experiment variants.
    pub fn variant(name: &str) -> Result<Flags> {
        let f = Flags::FULL;
        Ok(match name {
            "baseline" => Flags {
                use_global: false,
                use_local: false,
                use_e: false,
                use_prefix: false,
                ..f
            },
            "plus-e" | "wo-diff" => Flags {
                use_global: false,
                use_local: false,
                use_prefix: false,
                ..f
            },
            "global-e" => Flags { use_local: false, ..f },
            "local-e" => Flags { use_global: false, ..f },
            "full" => f,
            "pixel-diff" => Flags { pixel_diff: true, ..f },
            _ => return Err(Error::Config(format!("unknown variant {name:?}"))),
        })
    }

    pub fn needs_reference(&self) -> bool {
        self.use_prefix
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub extents: [usize; 3],
    pub enc_channels: [usize; 3],
    pub n_latent: usize,
    pub d: usize,
    pub heads: usize,
    pub prefix_len: usize,
    pub decoder: DecoderConfig,
    /// Adapter rank and scale; `None` trains the decoder fully.
    pub lora: Option<(usize, f32)>,
    pub lora_targets: Vec<AdapterTarget>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            extents: DEFAULT_EXTENTS,
            enc_channels: [32, 128, 512],
            n_latent: 32,
            d: 64,
            heads: 4,
            prefix_len: 16,
            decoder: DecoderConfig::default(),
            lora: None,
            lora_targets: vec![AdapterTarget::Q, AdapterTarget::V],
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Reduced encoder widths for CPU-scale runs.
    pub fn desk() -> Self {
        Self {
            enc_channels: [8, 16, 32],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub resampler: Resampler,
    pub global: GlobalDiff,
    pub local: LocalDiff,
    pub projector: Projector,
    pub visual: Linear,
    pub decoder: Decoder,
    pub aux: Linear,
}

/// Per-sample losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub gen: Var,
    pub cls: Var,
    pub total: Var,
}

impl Generator {
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.enc_channels[2];
        let (n, d, d_llm) = (config.n_latent, config.d, config.decoder.d_llm);
        let encoder = Encoder::new(store, &mut rng, config.extents, config.enc_channels);
        let resampler = Resampler::new(store, &mut rng, c, n, d, config.heads)?;
        let global = GlobalDiff::new(store, &mut rng, n, d, config.heads)?;
        let projector = Projector::new(store, &mut rng, d, d_llm, config.prefix_len)?;
        let visual = Linear::new(store, &mut rng, "vis", d, d_llm);
        let mut decoder = Decoder::new(store, &mut rng, config.decoder)?;
        let aux = Linear::new(store, &mut rng, "aux", d, NUM_CLASSES);
        if let Some((rank, alpha)) = config.lora {
            decoder.apply_adapters(store, &mut rng, &config.lora_targets, rank, alpha)?;
        }
        Ok(Self {
            config,
            encoder,
            resampler,
            global,
            local: LocalDiff,
            projector,
            visual,
            decoder,
            aux,
        })
    }

    /// Latent tokens `[n, d]` of one volume.
    pub fn latents(&self, g: &mut Graph, store: &ParamStore, voxels: &[f32]) -> Result<Var> {
        let f = self.encoder.encode(g, store, voxels)?;
        self.resampler.resample(g, store, f)
    }

    /// The two delta vectors (`[1, d]` each) fed to the prefix generator.
    /// Disabled paths contribute zero vectors.
    pub fn deltas(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        flags: &Flags,
        target: Var,
        voxels: &[f32],
        ref_voxels: &[f32],
    ) -> Result<(Var, Var)> {
        let d = self.config.d;
        if flags.pixel_diff {
            if voxels.len() != ref_voxels.len() {
                return Err(Error::shape("pixel_diff", &[voxels.len()], &[ref_voxels.len()]));
            }
            let diff: Vec<f32> = voxels.iter().zip(ref_voxels).map(|(a, b)| a - b).collect();
            let lat = self.latents(g, store, &diff)?;
            let pooled = g.mean_axis(lat, 0)?;
            let pooled = g.reshape(pooled, &[1, d])?;
            return Ok((pooled, pooled));
        }
        let reference = if flags.use_global || flags.use_local {
            Some(self.latents(g, store, ref_voxels)?)
        } else {
            None
        };
        let zero = |g: &mut Graph| g.input(Tensor::zeros([1, d]));
        let global = match (flags.use_global, reference) {
            (true, Some(r)) => self.global.forward(g, store, target, r)?,
            _ => zero(g),
        };
        let local = match (flags.use_local, reference) {
            (true, Some(r)) => self.local.forward(g, target, r)?,
            _ => zero(g),
        };
        Ok((global, local))
    }

    /// Builds `[prefix; proj(I); E; T]` and returns it with the target
    /// latents.
    pub fn condition(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        flags: &Flags,
        voxels: &[f32],
        ref_voxels: Option<&[f32]>,
        anchor: &[u32],
    ) -> Result<(InputSequence, Var)> {
        let target = self.latents(g, store, voxels)?;
        let prefix = if flags.use_prefix {
            let r = ref_voxels.ok_or_else(|| Error::Invalid("prefix requires a reference volume".into()))?;
            let (gd, ld) = self.deltas(g, store, flags, target, voxels, r)?;
            Some(self.projector.forward(g, store, gd, ld)?)
        } else {
            None
        };
        let visual = self.visual.forward(g, store, target)?;
        let anchor = if flags.use_e {
            Some(self.decoder.embed_tokens(g, store, anchor)?)
        } else {
            None
        };
        let instr = self.decoder.embed_tokens(g, store, &instruction_tokens())?;
        Ok((build_input(g, prefix, visual, anchor, instr)?, target))
    }

    /// Prefix `[p, d_llm]` from the voxelwise difference of the two volumes,
    /// routed through the same projector as the semantic deltas.
    pub fn pixel_diff_baseline_input(&self, g: &mut Graph, store: &ParamStore, voxels: &[f32], ref_voxels: &[f32]) -> Result<Var> {
        let flags = Flags {
            pixel_diff: true,
            ..Flags::FULL
        };
        let unused = g.input(Tensor::zeros([self.config.n_latent, self.config.d]));
        let (gd, ld) = self.deltas(g, store, &flags, unused, voxels, ref_voxels)?;
        self.projector.forward(g, store, gd, ld)
    }

    /// Mean BCE of the auxiliary head on mean-pooled latents.
    pub fn aux_cls_loss(&self, g: &mut Graph, store: &ParamStore, latents: Var, labels: &[u8; NUM_CLASSES]) -> Result<Var> {
        let pooled = g.mean_axis(latents, 0)?;
        let pooled = g.reshape(pooled, &[1, self.config.d])?;
        let z = self.aux.forward(g, store, pooled)?;
        let y: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        bce_with_logits(g, z, &y)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        flags: &Flags,
        voxels: &[f32],
        ref_voxels: Option<&[f32]>,
        anchor: &[u32],
        report: &[u32],
        labels: &[u8; NUM_CLASSES],
    ) -> Result<Losses> {
        let (input, target) = self.condition(g, store, flags, voxels, ref_voxels, anchor)?;
        let (rin, rout) = shift_report(report);
        let logits = self.decoder.forward(g, store, &input, &rin)?;
        let gen = nll_loss(g, logits, &rout)?;
        let cls = self.aux_cls_loss(g, store, target, labels)?;
        let total = g.add(gen, cls)?;
        Ok(Losses { gen, cls, total })
    }

    /// Greedy report for one case. `max_len` is reduced when the
    /// conditioning sequence leaves less room in the context.
    pub fn generate(
        &self,
        store: &ParamStore,
        flags: &Flags,
        voxels: &[f32],
        ref_voxels: Option<&[f32]>,
        anchor: &[u32],
        max_len: usize,
    ) -> Result<Vec<u32>> {
        let mut g = Graph::new();
        let (input, _) = self.condition(&mut g, store, flags, voxels, ref_voxels, anchor)?;
        let cond = Tensor::new(g.shape(input.embeds).to_vec(), g.value(input.embeds).to_vec())?;
        let room = self.decoder.config.context.saturating_sub(input.len);
        self.decoder.generate(store, &cond, max_len.min(room))
    }

    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        checkpoint::save(path, store)
    }

    /// Rebuilds the model from `config` and loads every tensor from `path`.
    pub fn load(path: &Path, config: ModelConfig) -> Result<(Self, ParamStore)> {
        let loaded = checkpoint::load(path)?;
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config)?;
        let n = store.load_from(&loaded)?;
        if n != store.len() || loaded.len() != store.len() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("expected {} generator tensors, matched {n}", store.len()),
            });
        }
        Ok((model, store))
    }
}
