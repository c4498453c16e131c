//! File formats: FVOL volumes, SEGM1 models, flat configs, JSON manifests,
//! CSV reports and PNG slices.

pub mod config;
pub mod csv;
pub mod fvol;
pub mod manifest;
pub mod model;
pub mod png;

pub use config::{RunConfig, SynthConfig};
pub use fvol::{
    read_displacement, read_labels, read_probs, read_scalar, read_volume, write_displacement, write_features,
    write_labels, write_probs, write_scalar,
};
pub use manifest::{LabeledCase, PairsManifest, PipelineData, PipelineManifest};
pub use model::{read_model, write_model};
pub use self::png::{emit_slice_png, SliceSource};
