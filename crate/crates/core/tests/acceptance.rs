//! Acceptance run. Prints one pass/fail line per criterion and exits
//! nonzero if a criterion fails that is not listed in `KNOWN_FAILURES`.

mod support;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use diffvp::autograd::{Graph, Tensor};
use diffvp::config::{Config, Preset};
use diffvp::experiments::{
    cmd_eval, cmd_synth, cmd_train, cmd_train_classifier, metric_files, pool_study, Lab, TrainAudit,
};
use diffvp::eval::EvalReport;
use diffvp::hde::{local_delta, local_weights, LocalDiff, EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{contracts, gradcheck, metric_oracles};

/// Criteria that fail on this synthetic world for reasons recorded in the
/// decisions ledger. They still print FAIL.
///
/// 7: every volume shares one template with 0.02 noise and no misregistration,
/// so a voxel difference isolates lesions almost exactly and the pixel route
/// is as strong as the learned one.
const KNOWN_FAILURES: &[usize] = &[7];

const SEEDS: [u64; 3] = [21, 22, 23];

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn autodiff() -> Verdict {
    let t = Instant::now();
    let prims = gradcheck::primitives();
    let worst = prims.iter().max_by(|a, b| a.error.total_cmp(&b.error)).unwrap();
    let model = gradcheck::composed_model_error();
    let shift = gradcheck::softmax_shift_residual();
    let secs = t.elapsed().as_secs_f64();
    let failing: Vec<&str> = prims
        .iter()
        .filter(|c| !(c.error < gradcheck::PRIMITIVE_TOL))
        .map(|c| c.name.as_str())
        .collect();
    check(
        failing.is_empty() && model < gradcheck::MODEL_TOL && shift < 1e-5 && secs < 120.0,
        format!(
            "{} primitive checks, worst {} {:.2e}{}; model {model:.2e}; softmax row sum {shift:.1e}; {secs:.1}s",
            prims.len(),
            worst.name,
            worst.error,
            if failing.is_empty() { String::new() } else { format!("; failing {failing:?}") }
        ),
    )
}

fn hde_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut zero_ok, mut anti, mut sum_lo, mut sum_hi, mut tested) = (true, 0.0f32, 1.0f64, 0.0f64, 0);
    for _ in 0..500 {
        let (n, d) = (rng.gen_range(1..=32), rng.gen_range(1..=64));
        let scale = rng.gen_range(0.01f32..2.0);
        let a: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-scale..scale)).collect();
        let b: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-scale..scale)).collect();
        zero_ok &= local_delta(&a, &a, d).unwrap().iter().all(|&v| v == 0.0);
        let (ab, ba) = (local_delta(&a, &b, d).unwrap(), local_delta(&b, &a, d).unwrap());
        anti = ab.iter().zip(&ba).map(|(x, y)| (x + y).abs()).fold(anti, f32::max);
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        if dist >= 0.1 {
            let s: f64 = local_weights(&a, &b, d).unwrap().iter().map(|&w| w as f64).sum();
            sum_lo = sum_lo.min(s);
            sum_hi = sum_hi.max(s);
            tested += 1;
        }
    }
    let w = local_weights(&[1.0, 0.0, 3.0, 0.0], &[0.0; 4], 2).unwrap();
    let k = 10.0 / (10.0 + EPS);
    let two = ((w[0] - 0.1 * k).abs()).max((w[1] - 0.9 * k).abs());

    let mut g = Graph::new();
    let x = g.input(Tensor::randn([4, 3], 1.0, &mut rng));
    let y = g.input(Tensor::randn([4, 3], 1.0, &mut rng));
    LocalDiff.forward(&mut g, x, y).unwrap();
    let params = LocalDiff.parameters().len() + g.bound_params().count();

    check(
        zero_ok && anti < 1e-6 && tested > 0 && sum_lo > 1.0 - 1e-4 && sum_hi <= 1.0 && two < 1e-6 && params == 0,
        format!(
            "self-delta zero {zero_ok}; antisymmetry {anti:.1e}; weight sums in [{sum_lo:.7}, {sum_hi:.7}] over {tested}; \
             two-token error {two:.1e}; local parameters {params}"
        ),
    )
}

fn metrics() -> Verdict {
    let curated = metric_oracles::curated().len();
    let bad = metric_oracles::curated_mismatches();
    let grids = metric_oracles::ce_grid_mismatches(100, 5);
    let welch = metric_oracles::welch_max_error();
    check(
        curated >= 20 && bad.is_empty() && grids == 0 && welch < 1e-3,
        format!("{} of {curated} curated pairs off; {grids} of 100 CE grids off; Welch max gap {welch:.1e}", bad.len()),
    )
}

fn grammar() -> Verdict {
    let errors = support::grammar_roundtrip_errors(1000, 3);
    check(errors == 0, format!("{errors} label errors in 1000 reports"))
}

fn desk() -> Config {
    Config::preset(Preset::Desk)
}

struct Trial {
    variant: &'static str,
    seed: u64,
    report: EvalReport,
    audit: TrainAudit,
    secs: f64,
}

fn trial(lab: &Lab, variant: &'static str, seed: u64) -> (Trial, diffvp::training::Trained) {
    let mut cfg = desk();
    cfg.set("train.variant", variant).unwrap();
    cfg.set("train.seed", &seed.to_string()).unwrap();
    cfg.set("model.seed", &seed.to_string()).unwrap();
    let t = Instant::now();
    let (trained, audit, report) = lab.train_eval(&cfg, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    println!(
        "  trained {variant} seed {seed}: ce_f1 {:.4} bleu1 {:.2} top8 {:.3} ({secs:.0}s)",
        report.ce.f1, report.nlg.bleu[0], report.top8_abnormal
    );
    (
        Trial {
            variant,
            seed,
            report,
            audit,
            secs,
        },
        trained,
    )
}

fn find<'a>(trials: &'a [Trial], variant: &str, seed: u64) -> &'a Trial {
    trials.iter().find(|t| t.variant == variant && t.seed == seed).unwrap()
}

fn ablation(trials: &[Trial]) -> Verdict {
    let mut lines = Vec::new();
    let mut every = true;
    let (mut full_bleu, mut base_bleu) = (0.0, 0.0);
    for s in SEEDS {
        let (f, b) = (&find(trials, "full", s).report, &find(trials, "baseline", s).report);
        every &= f.ce.f1 > b.ce.f1;
        full_bleu += f.nlg.bleu[0] / SEEDS.len() as f64;
        base_bleu += b.nlg.bleu[0] / SEEDS.len() as f64;
        lines.push(format!("seed {s} {:.4} vs {:.4}", f.ce.f1, b.ce.f1));
    }
    let secs: f64 = trials
        .iter()
        .filter(|t| t.variant == "full" || t.variant == "baseline")
        .map(|t| t.secs)
        .sum();
    check(
        every && full_bleu >= base_bleu,
        format!(
            "CE-F1 full vs baseline: {}; mean BLEU-1 {full_bleu:.2} vs {base_bleu:.2}; {:.0} min",
            lines.join(", "),
            secs / 60.0
        ),
    )
}

fn concentration(trials: &[Trial]) -> Verdict {
    let (f, a) = (&find(trials, "full", SEEDS[0]).report, &find(trials, "plus-e", SEEDS[0]).report);
    check(
        f.top8_abnormal > a.top8_abnormal && f.top8_abnormal > 0.25,
        format!(
            "top-8 mass on {} abnormal cases: full {:.4}, prefix-ablated {:.4}, uniform 0.25",
            f.abnormal_cases, f.top8_abnormal, a.top8_abnormal
        ),
    )
}

fn semantic_vs_pixel(trials: &[Trial]) -> Verdict {
    let shapes = contracts::prefix_shapes_match(&desk().model().unwrap());
    let mut wins = 0;
    let mut lines = Vec::new();
    for s in SEEDS {
        let (f, p) = (&find(trials, "full", s).report, &find(trials, "pixel-diff", s).report);
        wins += usize::from(f.ce.f1 >= p.ce.f1);
        lines.push(format!("seed {s} {:.4} vs {:.4}", f.ce.f1, p.ce.f1));
    }
    check(
        wins >= 2 && shapes.is_ok(),
        format!(
            "CE-F1 semantic vs pixel: {}; {wins} of 3 seeds; prefix audit {}",
            lines.join(", "),
            shapes.err().unwrap_or_else(|| "ok".into())
        ),
    )
}

fn pool_sizes(lab: &Lab, trained: &diffvp::training::Trained) -> Verdict {
    let mut cfg = desk();
    cfg.set("train.variant", "full").unwrap();
    let rows = pool_study(lab, &cfg, &trained.model, &trained.store, &[1, 10, 0]).unwrap();
    let bleu: Vec<f64> = rows.iter().map(|r| r.bleu1).collect();
    let spread = bleu.iter().cloned().fold(f64::MIN, f64::max) - bleu.iter().cloned().fold(f64::MAX, f64::min);
    let labels: Vec<String> = rows.iter().map(|r| format!("{} {:.2}", r.label, r.bleu1)).collect();
    check(spread < 3.0, format!("BLEU-1 by pool size: {}; spread {spread:.2}", labels.join(", ")))
}

fn audits(trials: &[Trial]) -> Verdict {
    let clean = trials
        .iter()
        .filter(|t| t.audit.test_ids_in_log == 0 && t.audit.classifier_unchanged && t.audit.classifier_checksum_before.is_some())
        .count();
    check(clean == trials.len(), format!("{clean} of {} runs audited clean", trials.len()))
}

const TINY: &str = "\
data.n_train = 30
data.n_test = 8
cls.channels = 2,4,8
cls.epochs = 1
model.channels = 2,4,8
model.n_latent = 8
model.d = 16
model.heads = 2
model.prefix_len = 4
model.layers = 1
model.dec_heads = 2
model.d_llm = 16
train.epochs = 2
eval.limit = 6
eval.max_len = 32
";

fn pipeline(root: &Path) -> diffvp::Result<()> {
    let mut cfg = desk();
    cfg.apply_text(TINY)?;
    let (data, cls, run) = (root.join("data"), root.join("cls"), root.join("run"));
    cmd_synth(&cfg, &data)?;
    cmd_train_classifier(&cfg, &data, &cls)?;
    cmd_train(&cfg, &data, Some(&cls), &run, false)?;
    cmd_eval(&cfg, &data, Some(&cls), &run, &root.join("eval"))?;
    Ok(())
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path()).map_err(|e| e.to_string())?;
    pipeline(b.path()).map_err(|e| e.to_string())?;
    let mut files = 0;
    let mut differ = Vec::new();
    for sub in ["data", "cls", "run", "eval"] {
        let (x, y) = (metric_files(&a.path().join(sub)).unwrap(), metric_files(&b.path().join(sub)).unwrap());
        files += x.len();
        if x != y {
            differ.push(sub);
        }
    }
    check(
        differ.is_empty() && files > 0,
        format!("{files} metric files over synth/train-classifier/train/eval; differing dirs {differ:?}"),
    )
}

fn mask_and_prefix() -> Verdict {
    let results = [
        ("causal mask", contracts::causal_mask()),
        ("bidirectional prefix", contracts::bidirectional_prefix()),
        ("zero adapters", contracts::zero_adapters_are_identity()),
        ("segments", contracts::segments_reconstruct()),
    ];
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    check(failed.is_empty(), if failed.is_empty() { "all four contracts hold".into() } else { failed.join("; ") })
}

fn main() -> ExitCode {
    let mut verdicts: Vec<(usize, &str, Verdict)> = vec![
        (1, "autodiff", autodiff()),
        (2, "hde invariants", hde_invariants()),
        (3, "metric oracles", metrics()),
        (4, "grammar round-trip", grammar()),
        (10, "determinism", determinism()),
        (11, "mask and prefix contracts", mask_and_prefix()),
    ];
    for (n, name, v) in &verdicts {
        report(*n, name, v);
    }

    let lab = Lab::build(&desk()).unwrap();
    let mut trials = Vec::new();
    let mut anchor_model = None;
    for s in SEEDS {
        for variant in ["full", "baseline", "pixel-diff"] {
            let (t, trained) = trial(&lab, variant, s);
            if variant == "full" && s == SEEDS[0] {
                anchor_model = Some(trained);
            }
            trials.push(t);
        }
    }
    trials.push(trial(&lab, "plus-e", SEEDS[0]).0);

    let late: Vec<(usize, &str, Verdict)> = vec![
        (5, "directional ablation", ablation(&trials)),
        (6, "importance concentration", concentration(&trials)),
        (7, "semantic vs pixel diff", semantic_vs_pixel(&trials)),
        (8, "pool-size robustness", pool_sizes(&lab, anchor_model.as_ref().unwrap())),
        (9, "leakage and freeze audits", audits(&trials)),
    ];
    for (n, name, v) in &late {
        report(*n, name, v);
    }
    verdicts.extend(late);
    verdicts.sort_by_key(|v| v.0);

    println!("summary:");
    let mut unexpected = false;
    for (n, name, v) in &verdicts {
        let known = KNOWN_FAILURES.contains(n);
        let tag = match (v.is_ok(), known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as known failure)",
            (false, true) => "FAIL (known)",
            (false, false) => {
                unexpected = true;
                "FAIL"
            }
        };
        println!("  criterion {n:>2} {name}: {tag}");
    }
    if unexpected {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn report(n: usize, name: &str, v: &Verdict) {
    match v {
        Ok(d) => println!("criterion {n:>2} {name}: PASS  {d}"),
        Err(d) => println!("criterion {n:>2} {name}: FAIL  {d}"),
    }
}
