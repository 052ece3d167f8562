//! Decoder masking, adapter injection and conditioning-sequence checks.

use diffvp::autograd::{Graph, ParamStore, Tensor};
use diffvp::data::{generate_case_with, Split, SynthParams};
use diffvp::decoder::{AdapterTarget, Decoder, DecoderConfig};
use diffvp::dpg::{anchor_to_prompt, build_input};
use diffvp::model::{Flags, Generator, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const D: usize = 8;

fn small_decoder(store: &mut ParamStore) -> Decoder {
    let cfg = DecoderConfig {
        layers: 2,
        heads: 2,
        d_llm: D,
        context: 32,
        ..DecoderConfig::default()
    };
    Decoder::new(store, &mut ChaCha8Rng::seed_from_u64(4), cfg).unwrap()
}

/// Gradient of one output position's hidden state w.r.t. every input row.
fn input_grad_rows(dec: &Decoder, store: &ParamStore, seq: &Tensor, prefix: usize, at: usize) -> Vec<Vec<f32>> {
    let mut g = Graph::new();
    let x = g.input(seq.clone().with_requires_grad(true));
    let h = dec.hidden(&mut g, store, x, prefix).unwrap();
    let row = g.slice(h, 0, at, 1).unwrap();
    let w = g.constant(&[1, D], (1..=D).map(|i| i as f32 * 0.1).collect()).unwrap();
    let y = g.mul(row, w).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    g.grad(x).unwrap().chunks(D).map(<[f32]>::to_vec).collect()
}

/// Every report position: exactly zero gradient from later rows, nonzero
/// from earlier ones.
pub fn causal_mask() -> Result<(), String> {
    let mut store = ParamStore::new();
    let dec = small_decoder(&mut store);
    let (p, t) = (4, 12);
    let seq = Tensor::randn([t, D], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    for at in p..t {
        for (j, r) in input_grad_rows(&dec, &store, &seq, p, at).iter().enumerate() {
            if j > at && r.iter().any(|&v| v != 0.0) {
                return Err(format!("position {at} sees future row {j}"));
            }
            if j <= at && r.iter().all(|&v| v == 0.0) {
                return Err(format!("position {at} ignores row {j}"));
            }
        }
    }
    Ok(())
}

/// Conditioning positions see each other but nothing after the prefix.
pub fn bidirectional_prefix() -> Result<(), String> {
    let mut store = ParamStore::new();
    let dec = small_decoder(&mut store);
    let (p, t) = (4, 10);
    let seq = Tensor::randn([t, D], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let rows = input_grad_rows(&dec, &store, &seq, p, 0);
    if !rows[..p].iter().all(|r| r.iter().any(|&v| v != 0.0)) {
        return Err("conditioning row 0 misses part of the conditioning block".into());
    }
    if !rows[p..].iter().all(|r| r.iter().all(|&v| v == 0.0)) {
        return Err("conditioning row 0 sees the report".into());
    }
    Ok(())
}

/// Zero-initialised adapters on Q/K/V/O leave logits bitwise unchanged and
/// are the only trainable parameters afterwards.
pub fn zero_adapters_are_identity() -> Result<(), String> {
    let mut store = ParamStore::new();
    let mut dec = small_decoder(&mut store);
    let seq = Tensor::randn([9, D], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    let logits = |dec: &Decoder, store: &ParamStore| {
        let mut g = Graph::new();
        let x = g.input(seq.clone());
        let l = dec.forward_embeds(&mut g, store, x, 3).unwrap();
        g.value(l).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let base = logits(&dec, &store);
    let before = store.len();
    let targets = [AdapterTarget::Q, AdapterTarget::K, AdapterTarget::V, AdapterTarget::O];
    dec.apply_adapters(&mut store, &mut ChaCha8Rng::seed_from_u64(8), &targets, 4, 16.0)
        .map_err(|e| e.to_string())?;
    if logits(&dec, &store) != base {
        return Err("adapted logits differ from base".into());
    }
    // 2 layers × 4 projections × (A, B)
    if store.len() != before + 16 {
        return Err(format!("expected 16 adapter tensors, got {}", store.len() - before));
    }
    let wrong = store
        .iter()
        .find(|(_, p)| p.trainable() != p.name().contains(".lora_"))
        .map(|(_, p)| p.name().to_string());
    match wrong {
        Some(name) => Err(format!("{name} has the wrong trainable flag")),
        None => Ok(()),
    }
}

/// Each segment of the assembled input is its source tensor, bit for bit.
pub fn segments_reconstruct() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let parts = [
        Tensor::randn([5, D], 1.0, &mut rng),
        Tensor::randn([7, D], 1.0, &mut rng),
        Tensor::randn([3, D], 1.0, &mut rng),
        Tensor::randn([6, D], 1.0, &mut rng),
    ];
    let mut g = Graph::new();
    let v: Vec<_> = parts.iter().map(|t| g.input(t.clone())).collect();
    let s = build_input(&mut g, Some(v[0]), v[1], Some(v[2]), v[3]).map_err(|e| e.to_string())?;
    let all = g.value(s.embeds);
    let mut covered = 0;
    for (k, part) in parts.iter().enumerate() {
        let (start, len) = s.segment(k);
        if start != covered || len != part.shape()[0] {
            return Err(format!("segment {k} spans {start}+{len}"));
        }
        let got = &all[start * D..(start + len) * D];
        if got.iter().zip(part.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("segment {k} differs from its input"));
        }
        covered += len;
    }
    if covered != s.len {
        return Err(format!("segments cover {covered} of {}", s.len));
    }
    Ok(())
}

/// Semantic and pixel-difference prefixes for three case pairs: same
/// `[p, d_llm]` shape, different values, and the pixel prefix equals the
/// stand-alone baseline input.
pub fn prefix_shapes_match(cfg: &ModelConfig) -> Result<(), String> {
    let mut store = ParamStore::new();
    let model = Generator::new(&mut store, cfg.clone()).map_err(|e| e.to_string())?;
    let params = SynthParams {
        extents: cfg.extents,
        noise_sd: 0.02,
    };
    let anchor = anchor_to_prompt(&[0.0; 18], 0.5);
    let d = cfg.decoder.d_llm;
    for seed in 0..3u64 {
        let case = generate_case_with(&params, "c".into(), Split::Train, 10 + seed, &[seed as usize * 5]).unwrap();
        let reference = generate_case_with(&params, "r".into(), Split::Train, 20 + seed, &[]).unwrap();
        let (v, r) = (case.volume.voxels(), reference.volume.voxels());
        let prefix = |flags: &Flags| {
            let mut g = Graph::new();
            let (s, _) = model.condition(&mut g, &store, flags, v, Some(r), &anchor).unwrap();
            let (start, len) = s.segment(0);
            ([len, d], g.value(s.embeds)[start * d..(start + len) * d].to_vec())
        };
        let (ss, semantic) = prefix(&Flags::FULL);
        let (ps, pixel) = prefix(&Flags::variant("pixel-diff").unwrap());
        if ss != [cfg.prefix_len, d] || ss != ps {
            return Err(format!("prefix shapes {ss:?} vs {ps:?}"));
        }
        if semantic == pixel {
            return Err("pixel and semantic prefixes coincide".into());
        }
        let mut g = Graph::new();
        let direct = model.pixel_diff_baseline_input(&mut g, &store, v, r).map_err(|e| e.to_string())?;
        if g.value(direct) != &pixel[..] {
            return Err("pixel prefix differs from the baseline input".into());
        }
    }
    Ok(())
}
