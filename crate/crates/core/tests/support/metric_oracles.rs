//! Hand-derived metric values and independent oracles.

use diffvp::data::NUM_CLASSES;
use diffvp::metrics::{bleu, clinical_efficacy, meteor_lite, rouge, welch_t_test, RougeVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Copy)]
pub enum M {
    Bleu(usize),
    R1,
    R2,
    Rl,
    Meteor,
}

pub fn score(m: M, cand: &str, reference: &str) -> f64 {
    let c: Vec<&str> = cand.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    match m {
        M::Bleu(n) => bleu(&c, &r, n),
        M::R1 => rouge(&c, &r, RougeVariant::One),
        M::R2 => rouge(&c, &r, RougeVariant::Two),
        M::Rl => rouge(&c, &r, RougeVariant::L),
        M::Meteor => meteor_lite(&c, &r),
    }
}

/// Each value is worked out by hand in the trailing comment.
pub fn curated() -> Vec<(M, &'static str, &'static str, f64)> {
    vec![
        // p1 = 1, BP = e^(1 - 4/3)
        (M::Bleu(1), "the cat sat", "the cat sat down", 100.0 * (-1.0f64 / 3.0).exp()),
        (M::Bleu(4), "a b c d", "a b c d", 100.0),
        (M::R1, "a b c d", "a b c d", 100.0),
        (M::R2, "a b c d", "a b c d", 100.0),
        (M::Rl, "a b c d", "a b c d", 100.0),
        // one chunk of 4: penalty 0.5/64
        (M::Meteor, "a b c d", "a b c d", 100.0 * (1.0 - 0.5 / 64.0)),
        // LCS 2: P = 2/3, R = 1
        (M::Rl, "a b c", "a c", 80.0),
        (M::R1, "c b a", "a b c", 100.0),
        // LCS 1: P = R = 1/3
        (M::Rl, "c b a", "a b c", 100.0 / 3.0),
        // bigrams {cb, ba} vs {ab, bc}
        (M::R2, "c b a", "a b c", 0.0),
        // 2 matches in 2 chunks: P = R = 0.5, penalty 0.5
        (M::Meteor, "a x b y", "a q r b", 25.0),
        (M::Bleu(1), "a b", "c d", 0.0),
        (M::Meteor, "a b", "c d", 0.0),
        // clipped 1 of 4
        (M::Bleu(1), "a a a a", "a b", 25.0),
        // P = 1/4, R = 1/2
        (M::R1, "a a a a", "a b", 100.0 / 3.0),
        // p1 = 1, p2 = (3+1)/(3+1), BP = e^(1 - 6/4)
        (M::Bleu(2), "a b c d", "a b c d e f", 100.0 * (-0.5f64).exp()),
        // p1 = 3/4, p2 = (1+1)/(3+1)
        (M::Bleu(2), "a b x d", "a b c d", 100.0 * (0.375f64).sqrt()),
        // p3 = (0+1)/(2+1), p4 = (0+1)/(1+1); product 1/16
        (M::Bleu(4), "a b x d", "a b c d", 50.0),
        (M::R2, "a b x d", "a b c d", 100.0 / 3.0),
        (M::Rl, "a b x d", "a b c d", 75.0),
        // m = 3, F = 0.75, 2 chunks: penalty 0.5·(2/3)^3 = 4/27
        (M::Meteor, "a b x d", "a b c d", 75.0 * 23.0 / 27.0),
        // stem pass: opacities → opacity; one chunk of 2
        (M::Meteor, "opacities seen", "opacity seen", 93.75),
        // P = 1/2, R = 1: F = 5/5.5, one chunk of 1
        (M::Meteor, "seen seen", "seen", 100.0 * (5.0 / 5.5) * 0.5),
        (M::Bleu(1), "", "a b", 0.0),
        (M::Rl, "", "", 0.0),
        (M::Bleu(3), "a b c", "a b c", 100.0),
        (M::Bleu(1), "a b c d e", "a b", 40.0),
        // P = 2/5, R = 1
        (M::R1, "a b c d e", "a b", 100.0 * 0.8 / 1.4),
        (M::Rl, "a b c d e", "e d c b a", 20.0),
        // crossed alignment: 2 chunks of 1
        (M::Meteor, "b a", "a b", 50.0),
        // p1 = 2/4, p2 = (1+1)/(3+1)
        (M::Bleu(2), "a b a b", "a b", 50.0),
    ]
}

/// Curated pairs off by 1e-6 or more as a proportion (1e-4 in percent).
pub fn curated_mismatches() -> Vec<String> {
    curated()
        .into_iter()
        .filter_map(|(m, c, r, expect)| {
            let got = score(m, c, r);
            ((got - expect).abs() >= 1e-4).then(|| format!("{m:?} {c:?} vs {r:?}: {got} != {expect}"))
        })
        .collect()
}

/// Random prediction/truth grids on which micro-averaged CE scores differ
/// from a confusion-matrix count, out of `grids`.
pub fn ce_grid_mismatches(grids: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..grids)
        .filter(|_| {
            let n = rng.gen_range(1..30);
            let density = rng.gen_range(0.0..0.6);
            let mut grid = || -> Vec<[u8; NUM_CLASSES]> {
                (0..n)
                    .map(|_| std::array::from_fn(|_| u8::from(rng.gen_bool(density))))
                    .collect()
            };
            let (pred, truth) = (grid(), grid());
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (p, t) in pred.iter().zip(&truth) {
                for k in 0..NUM_CLASSES {
                    match (p[k], t[k]) {
                        (1, 1) => tp += 1,
                        (1, 0) => fp += 1,
                        (0, 1) => fn_ += 1,
                        _ => {}
                    }
                }
            }
            let prec = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let rec = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            let got = clinical_efficacy(&pred, &truth).unwrap();
            (got.precision, got.recall, got.f1) != (prec, rec, f1)
        })
        .count()
}

/// p-value from t and Welch–Satterthwaite dof via the statrs Student-t.
pub fn welch_oracle(a: &[f64], b: &[f64]) -> f64 {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let ((ma, va, na), (mb, vb, nb)) = (stats(a), stats(b));
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).unwrap();
    2.0 * (1.0 - dist.cdf(t.abs()))
}

pub const WELCH_PAIRS: [(&[f64], &[f64]); 10] = [
    (&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]),
    (&[0.0, 0.1], &[10.0, 10.1]),
    (&[0.159, 0.171, 0.162, 0.158, 0.166], &[0.421, 0.415, 0.430, 0.418, 0.425]),
    (&[1.0, 1.5, 0.5], &[1.2, 1.1, 1.3, 0.9]),
    (&[5.0, 7.0, 9.0, 6.0], &[5.5, 6.5]),
    (&[0.3, 0.31, 0.29, 0.33, 0.28, 0.3], &[0.35, 0.2, 0.5]),
    (&[10.0, 12.0, 11.0], &[10.0, 12.0, 11.0]),
    (&[2.0, 4.0], &[3.0, 9.0, 1.0, 7.0, 5.0]),
    (&[-1.0, -2.0, -3.0], &[1.0, 2.0, 3.5]),
    (&[100.0, 101.0, 99.5, 100.2], &[100.4, 100.1, 99.9, 100.3, 100.0]),
];

/// Largest p-value gap to the oracle over the canned pairs.
pub fn welch_max_error() -> f64 {
    WELCH_PAIRS
        .iter()
        .map(|(a, b)| (welch_t_test(a, b).unwrap().p_two_sided - welch_oracle(a, b)).abs())
        .fold(0.0, f64::max)
}
