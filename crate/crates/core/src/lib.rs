//! Stage-aware time-to-event prediction for multivariate sensor streams.
//!
//! Each monitored instance moves monotonically through `K` hidden stages.
//! A stage carries a sparse Gaussian descriptor of the sensor features and a
//! first-hitting-time predictor for the remaining time until the event.

pub mod descriptor;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod ingest;
pub mod linalg;
pub mod moments;
pub mod predictor;
pub mod segmentation;
pub mod streaming;
pub mod synthetic;
pub mod types;

pub use error::{Result, TimecastError};
pub use exec::Exec;
pub use types::{
    FeatureConfig, HyperParams, LabeledCollection, ModelSet, Observation, SensorSequence,
    StageAssignmentPath, StageModel, StageStats, SCHEMA_VERSION,
};
