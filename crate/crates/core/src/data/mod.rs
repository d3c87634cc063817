//! Datasets, deterministic samplers and defense-training-set assembly.

mod dataset;
mod idx;
mod sampling;
mod synthetic;
mod trainset;

pub use dataset::Dataset;
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, PAD_TO};
pub use sampling::{fixed_test_subset, nshot_sample, random_sample, SamplerConfig, SamplerMode};
pub use synthetic::{gen_synthetic, gen_textures, SyntheticSpec};
pub use trainset::{build_defense_trainset, DefenseTrainset, Provenance};
