#![allow(dead_code)]

pub mod gradcheck;
pub mod contracts;
pub mod metric_oracles;

use diffvp::data::{draw_classes, generate_case_with, Split, SynthParams};
use diffvp::metrics::extract_labels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cases whose labels are not recovered from their own report, out of `n`
/// random synthetic cases.
pub fn grammar_roundtrip_errors(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SynthParams::default();
    (0..n)
        .filter(|&i| {
            let classes = draw_classes(&mut rng, 0.2, 0.25);
            let case = generate_case_with(&params, format!("g{i}"), Split::Train, rng.gen(), &classes).unwrap();
            extract_labels(&case.report) != case.labels
        })
        .count()
}
