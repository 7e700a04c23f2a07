//! Image ingestion, the synthetic texture corpus, repeated-split evaluation
//! and report files.

pub mod eval;
pub mod image;
pub mod manifest;
pub mod split;
pub mod synth;

pub use eval::{evaluate, evaluate_features, report_emit, Classifier, ConfusionMatrix, EvalReport, SvmClassifier};
pub use manifest::{load_dataset, load_images, DatasetManifest, LoadOptions};
pub use split::{split, SplitSpec};
pub use synth::synth_dataset;
