use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{self, SizeToken, NUM_CLASSES};
use super::volume::{synthesize_volume, LesionSpec, Volume, DEFAULT_EXTENTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Native,
    Shifted,
}

pub type Labels = [u8; NUM_CLASSES];

/// One synthetic study: volume, templated report and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub volume: Volume,
    pub report: Vec<u32>,
    pub labels: Labels,
    pub split: Split,
    pub domain_tag: DomainTag,
    pub lesions: Vec<LesionSpec>,
}

impl CaseRecord {
    pub fn is_normal(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    pub fn active_classes(&self) -> Vec<usize> {
        (0..NUM_CLASSES).filter(|&k| self.labels[k] == 1).collect()
    }
}

/// Knobs of the per-case generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub extents: [usize; 3],
    pub noise_sd: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            extents: DEFAULT_EXTENTS,
            noise_sd: 0.02,
        }
    }
}

/// Case with default parameters, id `case-<seed>`, tagged train.
pub fn generate_case(seed: u64, active_classes: &[usize]) -> Result<CaseRecord> {
    generate_case_with(&SynthParams::default(), format!("case-{seed}"), Split::Train, seed, active_classes)
}

pub fn generate_case_with(
    params: &SynthParams,
    id: String,
    split: Split,
    seed: u64,
    active_classes: &[usize],
) -> Result<CaseRecord> {
    if let Some(bad) = active_classes.iter().find(|&&k| k >= NUM_CLASSES) {
        return Err(Error::Invalid(format!("class index {bad} out of range")));
    }
    let mut active = active_classes.to_vec();
    active.sort_unstable();
    active.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lesions: Vec<LesionSpec> = active
        .iter()
        .map(|&k| LesionSpec::sample(k, params.extents, &mut rng))
        .collect();
    // noise draws come from a stream independent of the lesion draws, so a
    // case and its lesion-free twin share identical background noise
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let volume = synthesize_volume(params.extents, params.noise_sd, &lesions, &mut noise_rng);

    let mut sizes: [Option<SizeToken>; NUM_CLASSES] = [None; NUM_CLASSES];
    let mut labels = [0u8; NUM_CLASSES];
    for l in &lesions {
        sizes[l.class_index] = Some(l.size());
        labels[l.class_index] = 1;
    }
    Ok(CaseRecord {
        id,
        volume,
        report: grammar::report_tokens(&sizes),
        labels,
        split,
        domain_tag: DomainTag::Native,
        lesions,
    })
}

/// Draws the active class set for one case: empty with probability
/// `normal_frac`, otherwise independent per-class draws conditioned on at
/// least one positive.
pub fn draw_classes(rng: &mut impl Rng, normal_frac: f64, class_prob: f64) -> Vec<usize> {
    if rng.gen_bool(normal_frac.clamp(0.0, 1.0)) {
        return Vec::new();
    }
    loop {
        let active: Vec<usize> = (0..NUM_CLASSES).filter(|_| rng.gen_bool(class_prob)).collect();
        if !active.is_empty() {
            return active;
        }
    }
}
