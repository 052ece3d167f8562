//! The fixed report grammar and its vocabulary.
//!
//! A report holds one sentence per class, in class order:
//! `no <name> .` when the class is absent and `<size> <name> is seen .`
//! when present. Everything is lowercase and pre-tokenised on whitespace.

use std::collections::HashMap;
use std::sync::OnceLock;

pub const NUM_CLASSES: usize = 18;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "medical material",
    "arterial wall calcification",
    "cardiomegaly",
    "pericardial effusion",
    "coronary artery wall calcification",
    "hiatal hernia",
    "lymphadenopathy",
    "emphysema",
    "atelectasis",
    "lung nodule",
    "lung opacity",
    "pulmonary fibrotic sequela",
    "pleural effusion",
    "mosaic attenuation pattern",
    "peribronchial thickening",
    "consolidation",
    "bronchiectasis",
    "interlobular septal thickening",
];

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;

/// Quantised lesion size carried by positive sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeToken {
    Small,
    Medium,
    Large,
}

impl SizeToken {
    pub const ALL: [SizeToken; 3] = [SizeToken::Small, SizeToken::Medium, SizeToken::Large];

    pub fn word(self) -> &'static str {
        match self {
            SizeToken::Small => "small",
            SizeToken::Medium => "medium",
            SizeToken::Large => "large",
        }
    }
}

pub const INSTRUCTION: &str = "generate the findings report .";
const ANCHOR_HEAD: &str = "findings:";
const ANCHOR_NONE: &str = "none";
const ANCHOR_SEP: &str = ",";

/// Bijective token table: specials at ids 0..3, then grammar words in
/// first-appearance order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn build() -> Self {
        let mut words: Vec<String> = ["<bos>", "<eos>", "<pad>"].iter().map(|s| s.to_string()).collect();
        let push = |w: &str, words: &mut Vec<String>| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for w in ["no", ".", "is", "seen"] {
            push(w, &mut words);
        }
        for s in SizeToken::ALL {
            push(s.word(), &mut words);
        }
        for name in CLASS_NAMES {
            for w in name.split_whitespace() {
                push(w, &mut words);
            }
        }
        for w in [ANCHOR_HEAD, ANCHOR_NONE, ANCHOR_SEP] {
            push(w, &mut words);
        }
        for w in INSTRUCTION.split_whitespace() {
            push(w, &mut words);
        }
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, ids }
    }

    /// The shared grammar vocabulary.
    pub fn get() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::build)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Ids for whitespace-separated words; unknown words are an error.
    pub fn encode(&self, text: &str) -> crate::Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| crate::Error::Invalid(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }

    /// Space-joined words, skipping special tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i > PAD)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn words_of(&self, text: &str) -> Vec<u32> {
        self.encode(text).expect("grammar words are in the vocabulary")
    }
}

/// One sentence for class `k`: positive when `size` is given.
pub fn sentence(k: usize, size: Option<SizeToken>) -> String {
    match size {
        Some(s) => format!("{} {} is seen .", s.word(), CLASS_NAMES[k]),
        None => format!("no {} .", CLASS_NAMES[k]),
    }
}

/// Full report text from per-class sizes (None = absent).
pub fn render_report(sizes: &[Option<SizeToken>; NUM_CLASSES]) -> String {
    (0..NUM_CLASSES)
        .map(|k| sentence(k, sizes[k]))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn report_tokens(sizes: &[Option<SizeToken>; NUM_CLASSES]) -> Vec<u32> {
    Vocabulary::get().words_of(&render_report(sizes))
}

/// Anchor text naming the given classes, in index order.
pub fn anchor_text(present: &[usize]) -> String {
    if present.is_empty() {
        return format!("{ANCHOR_HEAD} {ANCHOR_NONE}");
    }
    let mut sorted = present.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let names: Vec<&str> = sorted.iter().map(|&k| CLASS_NAMES[k]).collect();
    format!("{ANCHOR_HEAD} {}", names.join(&format!(" {ANCHOR_SEP} ")))
}

pub fn instruction_tokens() -> Vec<u32> {
    Vocabulary::get().words_of(INSTRUCTION)
}

fn name_ids() -> &'static Vec<Vec<u32>> {
    static NAMES: OnceLock<Vec<Vec<u32>>> = OnceLock::new();
    NAMES.get_or_init(|| CLASS_NAMES.iter().map(|n| Vocabulary::get().words_of(n)).collect())
}

/// Parses one sentence (without its terminating `.`).
/// Returns `(class, positive)` or `None` for anything off-grammar.
pub fn parse_sentence(tokens: &[u32]) -> Option<(usize, bool)> {
    let v = Vocabulary::get();
    let (no, is, seen) = (v.id("no")?, v.id("is")?, v.id("seen")?);
    let sizes: Vec<u32> = SizeToken::ALL.iter().filter_map(|s| v.id(s.word())).collect();
    let find = |name: &[u32]| name_ids().iter().position(|n| n.as_slice() == name);
    match tokens {
        [first, rest @ ..] if *first == no => find(rest).map(|k| (k, false)),
        [first, mid @ .., a, b] if sizes.contains(first) && *a == is && *b == seen => {
            find(mid).map(|k| (k, true))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_fixed_and_vocab_is_bijective() {
        let v = Vocabulary::get();
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert!(v.len() <= 256);
        for i in 0..v.len() as u32 {
            assert_eq!(v.id(v.word(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn sentences_parse_back() {
        let v = Vocabulary::get();
        for k in 0..NUM_CLASSES {
            let neg = v.encode(&sentence(k, None)).unwrap();
            assert_eq!(parse_sentence(&neg[..neg.len() - 1]), Some((k, false)));
            let pos = v.encode(&sentence(k, Some(SizeToken::Large))).unwrap();
            assert_eq!(parse_sentence(&pos[..pos.len() - 1]), Some((k, true)));
        }
        assert_eq!(parse_sentence(&[]), None);
    }

    #[test]
    fn anchor_rendering() {
        assert_eq!(anchor_text(&[]), "findings: none");
        assert_eq!(anchor_text(&[9, 0]), "findings: medical material , lung nodule");
    }
}
