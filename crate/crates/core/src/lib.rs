//! Remote heart-rate estimation from facial feature-point intensity traces.
//!
//! Stages, in order: [`ingest`] loads or synthesizes landmark tracks and RGB
//! traces, [`recovery`] repairs the track after tracking collapse,
//! [`separation`] splits each trace into blood-flow and pigmentation
//! components, [`rectify`] removes illumination interference from the
//! blood-flow component, and [`hr`] reads the heart rate off the spectrum.
//! [`pipeline`] chains them and [`eval`] scores batches.

pub mod eval;
pub mod hr;
pub mod ingest;
pub mod pipeline;
pub mod recovery;
pub mod rectify;
pub mod separation;
pub mod spectrum;

pub use hr::{HrEstimate, HrReport};
pub use ingest::{GroundTruth, LandmarkFrame, LandmarkPoint, RgbTrace, TraceSet};
pub use pipeline::{estimate, EstimateOutput, PipelineConfig, PipelineError, SourceInput};
pub use recovery::{RecoveryEvent, RecoveryState};
pub use rectify::RlsState;
pub use separation::SeparatedSources;
