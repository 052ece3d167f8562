//! Synthetic scans, templated reports, and reference pools.

mod case;
mod dataset;
pub mod grammar;
mod pool;
mod volume;

pub use case::{draw_classes, generate_case, generate_case_with, CaseRecord, DomainTag, Labels, Split, SynthParams};
pub use dataset::{load_pool, mix_seed, save_pool, Dataset, SynthConfig};
pub use grammar::{Vocabulary, NUM_CLASSES};
pub use pool::{build_reference_pool, contaminate_pool, ReferencePool};
pub use volume::{
    background_template, class_zone, domain_shift_transform, synthesize_volume, LesionSpec, Volume, Zone,
    DEFAULT_EXTENTS,
};
