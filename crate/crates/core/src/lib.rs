//! Personalized speech intelligibility prediction from a listener's own
//! (audio, score) support pairs.
//!
//! The pipeline: [`signal`] normalizes audio level, [`calibration`] moves
//! scores to the normalized level, [`dataset`] builds listener-disjoint
//! folds and support/query episodes, [`fem`] embeds each (audio, condition)
//! pair, [`spm`] pools support embeddings and predicts query scores, and
//! [`training`] fits and evaluates the model.

pub mod calibration;
pub mod dataset;
pub mod error;
pub mod fem;
mod fsutil;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod signal;
pub mod spm;
pub mod synth;
pub mod training;

pub use calibration::{Audiogram, CalibrationCurveSet, Score};
pub use dataset::{ListenerBatch, Sample, SplitSpec};
pub use error::{Result, SsipError};
pub use fem::{BackboneExtractor, ConditionInput, Embedding, FeatureCache, FeatureSource, FemConfig};
pub use metrics::MetricsReport;
pub use model::{ModelMode, SsipModel};
pub use signal::Waveform;
pub use spm::Prediction;
pub use training::{Checkpoint, TrainConfig};
