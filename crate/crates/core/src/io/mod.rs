//! File formats and the synthetic data generator.

pub mod landmarks;
pub mod manifest;
pub mod nifti;
pub mod synth;

pub use landmarks::{read_landmarks, write_landmarks};
pub use manifest::{load_manifest, write_manifest, CaseRecord};
pub use nifti::{read_field, read_volume, write_field, write_volume};
pub use synth::{synthesize_case, synthesize_dataset, write_dataset, SyntheticCase, SyntheticSpec};
