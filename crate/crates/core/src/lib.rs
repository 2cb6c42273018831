//! Training and evaluation harness for field-localized identity-document
//! forgery detection.
//!
//! Precomputed field embeddings (face crop, text crop, or both concatenated)
//! are classified by a small fully connected head trained from scratch, and
//! every run is scored with the ISO/IEC 30107-3 presentation-attack-detection
//! metrics (APCER/BPCER curves, EER, BPCER at fixed APCER, ROC AUC) under
//! stratified k-fold cross-validation.
//!
//! Module map:
//!
//! - [`dataset`]: JSON Lines embedding manifests, scenario selection,
//!   stratified folds and the document leakage audit.
//! - [`nn`]: the classification head with hand-written backpropagation.
//! - [`optim`]: weighted BCE, Adam, plateau scheduling, early stopping and
//!   the training loop.
//! - [`fusion`]: face/text feature concatenation and the min-rule cascade.
//! - [`padmetrics`]: the PAD metric suite and fold aggregation.
//! - [`harness`]: cross-validated experiments, reports and plots.

pub mod dataset;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod padmetrics;
pub mod plot;
pub mod seed;
pub mod synthetic;

pub use dataset::{EmbeddingRecord, Field, Label, Manifest, Sample, SampleEmbedding, Scenario};
pub use harness::{ExperimentConfig, HarnessError};
pub use nn::MlpHead;
pub use optim::TrainConfig;
pub use padmetrics::{PadReport, ScoreSet};

/// Width of a single field embedding produced by the frozen backbone.
pub const EMBEDDING_DIM: usize = 576;
