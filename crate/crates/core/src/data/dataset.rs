//! Dataset synthesis and its on-disk form.
//!
//! A dataset directory holds `cases.jsonl` (one JSON object per case) and
//! `volumes.bin` (all volumes as little-endian f32, concatenated; each
//! record carries its element `offset` and `extents`). Reference pools are
//! stored beside it as `pool_<split>.json`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::case::{draw_classes, generate_case_with, CaseRecord, DomainTag, Labels, Split, SynthParams};
use super::grammar::NUM_CLASSES;
use super::pool::{build_reference_pool, ReferencePool};
use super::volume::{domain_shift_transform, LesionSpec, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub normal_frac: f64,
    pub class_prob: f64,
    pub seed: u64,
    pub params: SynthParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_test: 100,
            normal_frac: 0.3,
            class_prob: 0.15,
            seed: 7,
            params: SynthParams::default(),
        }
    }
}

/// SplitMix64 finaliser, used to derive independent per-case seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    cases: Vec<CaseRecord>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseLine {
    id: String,
    split: Split,
    labels: Vec<u8>,
    report: Vec<u32>,
    domain_tag: DomainTag,
    offset: usize,
    extents: [usize; 3],
    lesions: Vec<LesionSpec>,
}

impl Dataset {
    pub fn from_cases(cases: Vec<CaseRecord>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, c) in cases.iter().enumerate() {
            if index.insert(c.id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate case id {}", c.id)));
            }
        }
        Ok(Self { cases, index })
    }

    /// Generates `n_train + n_test` cases; case `i` of a split is seeded
    /// from `(seed, split, i)` only, so generation order does not matter.
    pub fn synthesize(cfg: &SynthConfig) -> Result<Self> {
        use rayon::prelude::*;
        if !(0.0..=1.0).contains(&cfg.normal_frac) || !(0.0..1.0).contains(&cfg.class_prob) || cfg.class_prob == 0.0 {
            return Err(Error::Config(format!(
                "normal_frac {} must be in [0,1] and class_prob {} in (0,1)",
                cfg.normal_frac, cfg.class_prob
            )));
        }
        let jobs: Vec<(Split, usize)> = (0..cfg.n_train)
            .map(|i| (Split::Train, i))
            .chain((0..cfg.n_test).map(|i| (Split::Test, i)))
            .collect();
        let cases = jobs
            .par_iter()
            .map(|&(split, i)| {
                let case_seed = mix_seed(mix_seed(cfg.seed, split as u64 + 1), i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
                let classes = draw_classes(&mut rng, cfg.normal_frac, cfg.class_prob);
                let id = format!("{split}-{i:05}");
                generate_case_with(&cfg.params, id, split, rng.gen(), &classes)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_cases(cases)
    }

    pub fn cases(&self) -> &[CaseRecord] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&CaseRecord> {
        self.index
            .get(id)
            .map(|&i| &self.cases[i])
            .ok_or_else(|| Error::Missing(format!("case {id}")))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    pub fn pool(&self, split: Split, max_size: usize) -> Result<ReferencePool> {
        build_reference_pool(&self.cases, split, max_size)
    }

    /// Uniform draw from `pool`, resolved to its case record.
    pub fn sample_reference(&self, pool: &ReferencePool, rng: &mut impl Rng) -> Result<&CaseRecord> {
        self.get(pool.sample(rng)?)
    }

    /// Applies an intensity shift to every member of `pool` and tags them shifted.
    pub fn shift_members(&mut self, pool: &ReferencePool, gain: f32, bias: f32, noise_sd: f32, seed: u64) -> Result<()> {
        for id in &pool.members {
            let &i = self
                .index
                .get(id)
                .ok_or_else(|| Error::Missing(format!("case {id}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let c = &mut self.cases[i];
            c.volume = domain_shift_transform(&c.volume, gain, bias, noise_sd, &mut rng);
            c.domain_tag = DomainTag::Shifted;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut lines = BufWriter::new(fs::File::create(dir.join("cases.jsonl"))?);
        let mut vols = BufWriter::new(fs::File::create(dir.join("volumes.bin"))?);
        let mut offset = 0;
        for c in &self.cases {
            let line = CaseLine {
                id: c.id.clone(),
                split: c.split,
                labels: c.labels.to_vec(),
                report: c.report.clone(),
                domain_tag: c.domain_tag,
                offset,
                extents: c.volume.extents(),
                lesions: c.lesions.clone(),
            };
            serde_json::to_writer(&mut lines, &line)?;
            lines.write_all(b"\n")?;
            for v in c.volume.voxels() {
                vols.write_all(&v.to_le_bytes())?;
            }
            offset += c.volume.len();
        }
        lines.flush()?;
        vols.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cases_path = dir.join("cases.jsonl");
        if !cases_path.exists() {
            return Err(Error::Missing(format!("dataset {}", dir.display())));
        }
        let raw = fs::read(dir.join("volumes.bin"))?;
        let floats: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut cases = Vec::new();
        for line in BufReader::new(fs::File::open(cases_path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: CaseLine = serde_json::from_str(&line)?;
            let n: usize = l.extents.iter().product();
            let voxels = floats
                .get(l.offset..l.offset + n)
                .ok_or_else(|| Error::Invalid(format!("volume of {} out of bounds", l.id)))?
                .to_vec();
            let labels: Labels = l
                .labels
                .as_slice()
                .try_into()
                .map_err(|_| Error::Invalid(format!("{} has {} labels, expected {NUM_CLASSES}", l.id, l.labels.len())))?;
            cases.push(CaseRecord {
                id: l.id,
                volume: Volume::new(l.extents, voxels)?,
                report: l.report,
                labels,
                split: l.split,
                domain_tag: l.domain_tag,
                lesions: l.lesions,
            });
        }
        Self::from_cases(cases)
    }
}

pub fn save_pool(dir: &Path, pool: &ReferencePool) -> Result<()> {
    let path = dir.join(format!("pool_{}.json", pool.split));
    fs::write(path, serde_json::to_string_pretty(pool)?)?;
    Ok(())
}

pub fn load_pool(dir: &Path, split: Split) -> Result<ReferencePool> {
    let path = dir.join(format!("pool_{split}.json"));
    if !path.exists() {
        return Err(Error::Missing(format!("pool manifest {}", path.display())));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
