use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffvp::config::{Config, Preset};
use diffvp::experiments::{self as ex, ABLATION_VARIANTS, POOL_SIZES, PREFIX_SWEEP, SEEDS};
use diffvp::{Error, Result};
use serde::Serialize;

/// Difference-conditioned report generation on synthetic volumes.
#[derive(Parser)]
#[command(name = "diffvp", version)]
struct Cli {
    /// Base preset: desk or full.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Config file of `key = value` lines, applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Data {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Classifier directory written by `train-classifier`.
    #[arg(long)]
    classifier: Option<PathBuf>,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    contamination: Option<f64>,
    #[arg(long)]
    shift_gain: Option<f32>,
    #[arg(long)]
    shift_bias: Option<f32>,
    #[arg(long)]
    shift_noise: Option<f32>,
    #[arg(long)]
    pairing_seed: Option<u64>,
    /// Evaluate only the first N test cases.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a dataset with both reference pools.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and freeze the finding classifier.
    TrainClassifier {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one generator variant.
    Train {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the state saved in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained run on the test split.
    Eval {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Train and evaluate each ablation variant.
    Ablate {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Train and evaluate one run per prefix length.
    SweepPrefix {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Repeat variants over seeds and compare them with Welch tests.
    Seeds {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// The first variant is the comparison base.
        #[arg(long, value_delimiter = ',', default_value = "baseline,full")]
        variants: Vec<String>,
    },
    /// Evaluate one run against test pools of several sizes (0 = all).
    PoolStudy {
        #[command(flatten)]
        data: Data,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Export importance scores and local weights per case.
    Diffmap {
        #[arg(long)]
        data: PathBuf,
        /// `label=dir`, repeatable; e.g. `with-prefix=runs/full`.
        #[arg(long = "run", required = true)]
        runs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn set_opt<T: ToString>(cfg: &mut Config, key: &str, v: Option<T>) -> Result<()> {
    match v {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn apply_eval(cfg: &mut Config, e: &EvalFlags) -> Result<()> {
    set_opt(cfg, "eval.pool_size", e.pool_size)?;
    set_opt(cfg, "eval.contamination", e.contamination)?;
    set_opt(cfg, "eval.shift_gain", e.shift_gain)?;
    set_opt(cfg, "eval.shift_bias", e.shift_bias)?;
    set_opt(cfg, "eval.shift_noise", e.shift_noise)?;
    set_opt(cfg, "eval.pairing_seed", e.pairing_seed)?;
    set_opt(cfg, "eval.limit", e.limit)
}

fn or_default<T: Clone>(v: Vec<T>, default: &[T]) -> Vec<T> {
    if v.is_empty() {
        default.to_vec()
    } else {
        v
    }
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_run(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((label, dir)) if !label.is_empty() && !dir.is_empty() => Ok((label.to_string(), PathBuf::from(dir))),
        _ => Ok((
            Path::new(spec)
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| Error::Invalid(format!("bad run spec {spec:?}")))?,
            PathBuf::from(spec),
        )),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = Config::preset(cli.preset.parse::<Preset>()?);
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for s in &cli.sets {
        cfg.set_pair(s)?;
    }
    match cli.command {
        Command::Synth { out } => print(&ex::cmd_synth(&cfg, &out)?),
        Command::TrainClassifier { data, out } => print(&ex::cmd_train_classifier(&cfg, &data, &out)?),
        Command::Train {
            data,
            out,
            variant,
            epochs,
            resume,
        } => {
            set_opt(&mut cfg, "train.variant", variant)?;
            set_opt(&mut cfg, "train.epochs", epochs)?;
            print(&ex::cmd_train(&cfg, &data.data, data.classifier.as_deref(), &out, resume)?)
        }
        Command::Eval { data, run, out, eval } => {
            apply_eval(&mut cfg, &eval)?;
            let out = out.unwrap_or_else(|| run.join("eval"));
            let report = ex::cmd_eval(&cfg, &data.data, data.classifier.as_deref(), &run, &out)?;
            print(&serde_json::json!({
                "cases": report.cases,
                "nlg": report.nlg,
                "ce": report.ce,
                "top8_abnormal": report.top8_abnormal,
                "audit": report.audit,
            }))
        }
        Command::Ablate { data, out, variants } => {
            let defaults: Vec<String> = ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect();
            let variants = or_default(variants, &defaults);
            print(&ex::cmd_ablate(&cfg, &data.data, data.classifier.as_deref(), &out, &variants)?)
        }
        Command::SweepPrefix { data, out, lengths } => {
            let lengths = or_default(lengths, PREFIX_SWEEP);
            print(&ex::cmd_sweep_prefix(&cfg, &data.data, data.classifier.as_deref(), &out, &lengths)?)
        }
        Command::Seeds {
            data,
            out,
            seeds,
            variants,
        } => {
            let seeds = or_default(seeds, SEEDS);
            let (_, summary) = ex::cmd_seeds(&cfg, &data.data, data.classifier.as_deref(), &out, &seeds, &variants)?;
            print(&summary)
        }
        Command::PoolStudy { data, run, out, sizes } => {
            let sizes = or_default(sizes, POOL_SIZES);
            print(&ex::cmd_pool_study(&cfg, &data.data, data.classifier.as_deref(), &run, &out, &sizes)?)
        }
        Command::Diffmap { data, runs, out, limit } => {
            set_opt(&mut cfg, "eval.limit", limit)?;
            let runs = runs.iter().map(|r| parse_run(r)).collect::<Result<Vec<_>>>()?;
            print(&ex::cmd_diffmap(&cfg, &data, &runs, &out)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = std::env::var("DVP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("DVP_THREADS ignored: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
