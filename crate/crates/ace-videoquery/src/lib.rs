//! Intelligent video-query reference application: crop generation and
//! detection on camera nodes, a calibrated edge classifier per EC, one cloud
//! classifier, in-app controllers carrying the basic and advanced policies,
//! and the experiment harness comparing the cloud-only, edge-only and
//! collaborative implementations of the same task.

pub mod components;
pub mod crop;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod paradigm;
pub mod policy;

pub use experiment::{run_experiment, ExperimentMatrix, RunParams};
pub use metrics::MetricsReport;
pub use paradigm::Paradigm;
