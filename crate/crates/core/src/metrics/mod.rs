//! Report metrics: n-gram overlap, clinical efficacy, and statistics.

mod clinical;
mod nlg;
mod stats;

pub use clinical::{clinical_efficacy, extract_labels, CeScores};
pub use nlg::{
    align, bleu, brevity_penalty, chunks, lcs_len, meteor_lite, rouge, stem, NlgScores, RougeVariant, STEM_RULES,
};
pub use stats::{beta_reg, ln_gamma, top_k_mass, welch_t_test, WelchResult};
