//! Test-split evaluation: generation with test-pool references, metrics,
//! importance statistics, and the reference audit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::classifier::FrozenClassifier;
use crate::data::{mix_seed, CaseRecord, Dataset, Labels, ReferencePool, Split, Vocabulary};
use crate::dpg::DEFAULT_THRESHOLD;
use crate::error::{Error, Result};
use crate::hde::importance_scores;
use crate::metrics::{clinical_efficacy, extract_labels, top_k_mass, CeScores, NlgScores};
use crate::model::{Flags, Generator};
use crate::training::anchors_for;

pub const TOP_K: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub pairing_seed: u64,
    pub max_len: usize,
    pub threshold: f32,
    /// Evaluate only the first `limit` test cases (in id order).
    pub limit: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pairing_seed: 5,
            max_len: 128,
            threshold: DEFAULT_THRESHOLD,
            limit: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub reference_id: String,
    pub tokens: Vec<u32>,
    pub text: String,
    pub predicted: Labels,
    pub truth: Labels,
    pub nlg: NlgScores,
    pub scores: Vec<f32>,
    pub top_k_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolAudit {
    pub pool_size: usize,
    pub contamination_ratio: f64,
    pub contaminants: usize,
    pub references_in_pool: bool,
    pub references_in_split: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub flags: Flags,
    pub cases: usize,
    pub nlg: NlgScores,
    pub ce: CeScores,
    /// Mean top-8 importance mass over abnormal cases.
    pub top8_abnormal: f64,
    pub abnormal_cases: usize,
    pub audit: PoolAudit,
    pub per_case: Vec<CaseResult>,
}

/// Test cases in id order (first `limit`), each paired with the reference
/// drawn for it under `pairing_seed`.
pub fn test_pairings<'a>(
    dataset: &'a Dataset,
    pool: &ReferencePool,
    pairing_seed: u64,
    limit: usize,
) -> Result<Vec<(&'a CaseRecord, &'a CaseRecord)>> {
    if pool.split != Split::Test {
        return Err(Error::Leakage(format!("evaluation with a {} pool", pool.split)));
    }
    let mut cases: Vec<&CaseRecord> = dataset.split(Split::Test).collect();
    cases.sort_by(|a, b| a.id.cmp(&b.id));
    cases.truncate(limit);
    cases
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(pairing_seed, i as u64));
            Ok((c, dataset.sample_reference(pool, &mut rng)?))
        })
        .collect()
}

/// Generates a report for every test case. Each case draws its reference
/// from `pool` with an rng seeded by `(pairing_seed, case index)`, so two
/// models evaluated with the same options see identical pairings.
pub fn evaluate(
    model: &Generator,
    store: &ParamStore,
    dataset: &Dataset,
    pool: &ReferencePool,
    classifier: Option<&FrozenClassifier>,
    flags: &Flags,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if flags.use_e && classifier.is_none() {
        return Err(Error::Missing("classifier checkpoint required when the anchor is enabled".into()));
    }
    let pairs = test_pairings(dataset, pool, opts.pairing_seed, opts.limit)?;
    let cases: Vec<&CaseRecord> = pairs.iter().map(|p| p.0).collect();
    let anchors = anchors_for(&cases, classifier, opts.threshold)?;
    let vocab = Vocabulary::get();
    let d = model.config.d;

    let per_case: Vec<CaseResult> = pairs
        .par_iter()
        .map(|&(c, r)| {
            let tokens = model.generate(
                store,
                flags,
                c.volume.voxels(),
                Some(r.volume.voxels()),
                &anchors[&c.id],
                opts.max_len,
            )?;
            let mut g = Graph::new();
            let it = model.latents(&mut g, store, c.volume.voxels())?;
            let ir = model.latents(&mut g, store, r.volume.voxels())?;
            let scores = importance_scores(g.value(it), g.value(ir), d)?;
            let text = vocab.decode(&tokens);
            let reference_text = vocab.decode(&c.report);
            let cand: Vec<&str> = text.split_whitespace().collect();
            let refw: Vec<&str> = reference_text.split_whitespace().collect();
            Ok(CaseResult {
                case_id: c.id.clone(),
                reference_id: r.id.clone(),
                predicted: extract_labels(&tokens),
                truth: c.labels,
                nlg: NlgScores::sentence(&cand, &refw),
                top_k_mass: top_k_mass(&scores, TOP_K.min(scores.len()))?,
                scores,
                tokens,
                text,
            })
        })
        .collect::<Result<_>>()?;

    let preds: Vec<Labels> = per_case.iter().map(|c| c.predicted).collect();
    let truth: Vec<Labels> = per_case.iter().map(|c| c.truth).collect();
    let abnormal: Vec<f64> = per_case
        .iter()
        .filter(|c| c.truth.iter().any(|&l| l == 1))
        .map(|c| c.top_k_mass)
        .collect();
    let audit = PoolAudit {
        pool_size: pool.len(),
        contamination_ratio: pool.contamination_ratio,
        contaminants: pool.contaminants.len(),
        references_in_pool: per_case.iter().all(|c| pool.members.contains(&c.reference_id)),
        references_in_split: per_case
            .iter()
            .all(|c| dataset.get(&c.reference_id).map(|r| r.split == Split::Test).unwrap_or(false)),
    };
    if !audit.references_in_pool || !audit.references_in_split {
        return Err(Error::Leakage("evaluation reference outside the test pool".into()));
    }
    Ok(EvalReport {
        flags: *flags,
        cases: per_case.len(),
        nlg: NlgScores::mean(&per_case.iter().map(|c| c.nlg).collect::<Vec<_>>()),
        ce: clinical_efficacy(&preds, &truth)?,
        top8_abnormal: if abnormal.is_empty() {
            0.0
        } else {
            abnormal.iter().sum::<f64>() / abnormal.len() as f64
        },
        abnormal_cases: abnormal.len(),
        audit,
        per_case,
    })
}
