//! Region-based person detection from scratch: selective-search proposals,
//! a small convolutional network with ROI max-pooling, configurable training
//! ROI selection, and VOC-style evaluation with false-positive diagnosis.

pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod geometry;
pub mod layers;
pub mod loss;
pub mod network;
pub mod proposals;
pub mod roi_pool;
pub mod sampling;
pub mod tensor;

pub use data::{DatasetManifest, Split, SynthConfig};
pub use detector::{Detection, DetectorConfig};
pub use error::{Error, Result};
pub use evaluation::{ApMode, EvalReport, Verdict};
pub use geometry::{decode_bbox, encode_bbox, iou, Annotation, BBox, BBoxDelta};
pub use network::{Network, NetworkSpec, Profile, Sgd, SgdConfig};
pub use roi_pool::RoiPoolConfig;
pub use sampling::{classify_roi, RoiClass, RoiSamplingConfig, SamplingPreset};
pub use tensor::{Real, Tensor};
