//! Finding extraction from report tokens and micro-averaged clinical
//! efficacy.

use serde::{Deserialize, Serialize};

use crate::data::grammar::{parse_sentence, NUM_CLASSES, PAD};
use crate::data::{Labels, Vocabulary};
use crate::error::{Error, Result};

/// Label `k` is set iff a positive sentence for class `k` occurs.
/// Special tokens are dropped and off-grammar sentences ignored.
pub fn extract_labels(report: &[u32]) -> Labels {
    let stop = Vocabulary::get().id(".").expect("period token");
    let words: Vec<u32> = report.iter().copied().filter(|&t| t > PAD).collect();
    let mut out = [0u8; NUM_CLASSES];
    for sentence in words.split(|&t| t == stop) {
        if let Some((k, true)) = parse_sentence(sentence) {
            out[k] = 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl CeScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

/// Micro-averaged P/R/F1 over every case × class cell.
pub fn clinical_efficacy(preds: &[Labels], gts: &[Labels]) -> Result<CeScores> {
    if preds.len() != gts.len() {
        return Err(Error::shape("clinical_efficacy", &[preds.len()], &[gts.len()]));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        for k in 0..NUM_CLASSES {
            match (p[k], g[k]) {
                (1, 1) => tp += 1,
                (1, _) => fp += 1,
                (_, 1) => fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(CeScores::from_counts(tp, fp, fn_))
}
