//! Dataset manifest and feature-file I/O plus the synthetic
//! planted-correspondence generator.

mod features;
mod manifest;
mod synthetic;

pub use features::{read_feature_file, write_feature_file};
pub use manifest::{
    load_dataset, write_dataset, FeatureFileRef, Manifest, ManifestImage, ManifestPhrase,
    ManifestProposal, ManifestSentence,
};
pub use synthetic::{generate_split_datasets, generate_synthetic, SplitCounts, SyntheticSpec};
