//! Procedural labeled images and the two out-of-distribution corruptions
//! (low light, occlusion masking).

pub mod corruption;
pub mod dataset;
pub mod probe;

pub use corruption::{
    corrupt, corrupt_dataset, corrupt_low_light, corrupt_masked, CorruptionKind, CorruptionSpec,
    ManifestRow, MaskMode, write_manifest,
};
pub use probe::{LinearProbe, ProbeOptions};
pub use dataset::{generate_dataset, LabeledImages, SyntheticDatasetSpec};
