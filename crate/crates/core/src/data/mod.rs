//! Dataset manifests, VOC import and the synthetic generator.

pub mod manifest;
pub mod synth;
pub mod voc;

pub use manifest::{BoxRecord, DatasetManifest, ManifestEntry, Split};
pub use synth::{generate_synthetic, render_image, synth_manifest, Style, SynthConfig};
pub use voc::import_voc_dir;
