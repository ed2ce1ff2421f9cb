//! Dual-phase detection pipeline for small, cluttered image datasets.
//!
//! Phase one is a two-stage region-proposal detector that localises the
//! object of interest; phase two classifies fixed-size crops of the detected
//! regions with a small convolutional network. The crate also ships the
//! evaluation protocol (IoU matching, AP/mAP, accuracy, k-fold cross
//! validation) and a procedural scene generator used as a testbed.

pub mod anchors;
pub mod classifier;
pub mod config;
pub mod dataio;
pub mod detector;
pub mod dualphase;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod netcore;
pub mod roi;
pub mod synth;

pub use anchors::{AnchorSpec, RpnTargets};
pub use classifier::{Classifier, ClassifierConfig};
pub use config::PipelineConfig;
pub use dataio::{ClassLabel, DatasetManifest, ImageRecord, RasterImage};
pub use detector::{Detection, Detector, DetectorConfig};
pub use dualphase::DerivationRule;
pub use error::{Error, Result};
pub use eval::{EvalReport, FoldPlan};
pub use geometry::{BBox, BoxDelta};
pub use netcore::{Scalar, Tensor};
pub use synth::SceneSpec;
