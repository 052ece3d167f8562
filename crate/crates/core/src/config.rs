//! Flat `key = value` run configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key ws* '=' ws* value ws*
//! key     := section '.' name        (see KEYS for the full list)
//! ```
//!
//! Values are parsed by the key's type; lists are comma-separated without
//! brackets. Unknown keys and unparsable values are errors. A preset
//! supplies every key, then a file and `--set` flags override it in that
//! order.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::classifier::ClassifierConfig;
use crate::data::{SynthConfig, SynthParams, DEFAULT_EXTENTS};
use crate::decoder::{AdapterTarget, DecoderConfig};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::{Flags, ModelConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Count,
    Seed,
    Real,
    Ratio,
    Channels,
    Targets,
    Variant,
}

/// Every recognised key, its type, and its desk default.
const KEYS: &[(&str, Kind, &str)] = &[
    ("data.n_train", Kind::Count, "400"),
    ("data.n_test", Kind::Count, "100"),
    ("data.normal_frac", Kind::Ratio, "0.3"),
    ("data.class_prob", Kind::Ratio, "0.15"),
    ("data.noise_sd", Kind::Real, "0.02"),
    ("data.seed", Kind::Seed, "7"),
    ("cls.channels", Kind::Channels, "8,16,32"),
    ("cls.epochs", Kind::Count, "6"),
    ("cls.lr", Kind::Real, "0.003"),
    ("cls.batch_size", Kind::Count, "8"),
    ("cls.seed", Kind::Seed, "11"),
    ("model.channels", Kind::Channels, "8,16,32"),
    ("model.n_latent", Kind::Count, "32"),
    ("model.d", Kind::Count, "64"),
    ("model.heads", Kind::Count, "4"),
    ("model.prefix_len", Kind::Count, "16"),
    ("model.layers", Kind::Count, "2"),
    ("model.dec_heads", Kind::Count, "4"),
    ("model.d_llm", Kind::Count, "64"),
    ("model.context", Kind::Count, "256"),
    ("model.lora_rank", Kind::Count, "0"),
    ("model.lora_alpha", Kind::Real, "16"),
    ("model.lora_targets", Kind::Targets, "q,v"),
    ("model.seed", Kind::Seed, "1"),
    ("train.variant", Kind::Variant, "full"),
    ("train.epochs", Kind::Count, "10"),
    ("train.batch_size", Kind::Count, "1"),
    ("train.lr", Kind::Real, "0.001"),
    ("train.clip", Kind::Real, "1"),
    ("train.pool_size", Kind::Count, "0"),
    ("train.seed", Kind::Seed, "21"),
    ("anchor.threshold", Kind::Ratio, "0.5"),
    ("eval.pairing_seed", Kind::Seed, "5"),
    ("eval.max_len", Kind::Count, "128"),
    ("eval.limit", Kind::Count, "0"),
    ("eval.pool_size", Kind::Count, "0"),
    ("eval.contamination", Kind::Ratio, "0"),
    ("eval.shift_gain", Kind::Real, "1"),
    ("eval.shift_bias", Kind::Real, "0"),
    ("eval.shift_noise", Kind::Real, "0"),
    ("eval.shift_seed", Kind::Seed, "13"),
];

/// Overrides of the `full` preset relative to `desk`.
const FULL: &[(&str, &str)] = &[
    ("model.channels", "32,128,512"),
    ("train.epochs", "10"),
    ("train.lr", "0.00005"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

fn kind_of(key: &str) -> Result<(&'static str, Kind)> {
    KEYS.iter()
        .find(|(k, _, _)| *k == key)
        .map(|&(k, kind, _)| (k, kind))
        .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))
}

fn parse_channels(v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad channel list {v:?}")))?;
    match parts[..] {
        [a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
        _ => Err(Error::Config(format!("expected three positive channels, got {v:?}"))),
    }
}

fn parse_targets(v: &str) -> Result<Vec<AdapterTarget>> {
    v.split(',').map(|t| t.trim().parse()).collect()
}

fn check(key: &str, kind: Kind, v: &str) -> Result<()> {
    let bad = || Error::Config(format!("bad value {v:?} for {key}"));
    match kind {
        Kind::Count => v.parse::<usize>().map(drop).map_err(|_| bad()),
        Kind::Seed => v.parse::<u64>().map(drop).map_err(|_| bad()),
        Kind::Real => match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(()),
            _ => Err(bad()),
        },
        Kind::Ratio => match v.parse::<f64>() {
            Ok(x) if (0.0..=1.0).contains(&x) => Ok(()),
            _ => Err(bad()),
        },
        Kind::Channels => parse_channels(v).map(drop),
        Kind::Targets => parse_targets(v).map(drop),
        Kind::Variant => Flags::variant(v).map(drop),
    }
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        let mut values: BTreeMap<&'static str, String> = KEYS.iter().map(|&(k, _, d)| (k, d.to_string())).collect();
        if p == Preset::Full {
            for &(k, v) in FULL {
                values.insert(k, v.to_string());
            }
        }
        Self { values }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, kind) = kind_of(key)?;
        let value = value.trim();
        check(k, kind, value)?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Missing(format!("config file {}", path.display())));
        }
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    /// All entries in key order, in the file grammar.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (*k, v.as_str()))
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        let (k, _) = kind_of(key)?;
        Ok(&self.values[k])
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parsed(key)
    }

    pub fn f32(&self, key: &str) -> Result<f32> {
        self.parsed(key)
    }

    pub fn channels(&self, key: &str) -> Result<[usize; 3]> {
        parse_channels(self.get(key)?)
    }

    /// Size keys use 0 for "no cap".
    pub fn cap(&self, key: &str) -> Result<usize> {
        Ok(match self.usize(key)? {
            0 => usize::MAX,
            n => n,
        })
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            n_train: self.usize("data.n_train")?,
            n_test: self.usize("data.n_test")?,
            normal_frac: self.f64("data.normal_frac")?,
            class_prob: self.f64("data.class_prob")?,
            seed: self.u64("data.seed")?,
            params: SynthParams {
                extents: DEFAULT_EXTENTS,
                noise_sd: self.f32("data.noise_sd")?,
            },
        })
    }

    pub fn classifier(&self) -> Result<ClassifierConfig> {
        Ok(ClassifierConfig {
            extents: DEFAULT_EXTENTS,
            channels: self.channels("cls.channels")?,
            epochs: self.usize("cls.epochs")?,
            lr: self.f32("cls.lr")?,
            batch_size: self.usize("cls.batch_size")?,
            seed: self.u64("cls.seed")?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let rank = self.usize("model.lora_rank")?;
        Ok(ModelConfig {
            extents: DEFAULT_EXTENTS,
            enc_channels: self.channels("model.channels")?,
            n_latent: self.usize("model.n_latent")?,
            d: self.usize("model.d")?,
            heads: self.usize("model.heads")?,
            prefix_len: self.usize("model.prefix_len")?,
            decoder: DecoderConfig {
                layers: self.usize("model.layers")?,
                heads: self.usize("model.dec_heads")?,
                d_llm: self.usize("model.d_llm")?,
                context: self.usize("model.context")?,
                ..DecoderConfig::default()
            },
            lora: (rank > 0).then_some((rank, self.f32("model.lora_alpha")?)),
            lora_targets: parse_targets(self.get("model.lora_targets")?)?,
            seed: self.u64("model.seed")?,
        })
    }

    pub fn flags(&self) -> Result<Flags> {
        Flags::variant(self.get("train.variant")?)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.usize("train.epochs")?,
            batch_size: self.usize("train.batch_size")?,
            lr: self.f32("train.lr")?,
            seed: self.u64("train.seed")?,
            clip: self.f64("train.clip")?,
            flags: self.flags()?,
            threshold: self.f32("anchor.threshold")?,
            pool_size: self.cap("train.pool_size")?,
        })
    }

    pub fn eval(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            pairing_seed: self.u64("eval.pairing_seed")?,
            max_len: self.usize("eval.max_len")?,
            threshold: self.f32("anchor.threshold")?,
            limit: self.cap("eval.limit")?,
        })
    }
}
