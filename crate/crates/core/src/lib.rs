//! Stream-based active distillation data selection.
//!
//! Frames from an edge camera stream are gated by student confidence,
//! buffered into a candidate set, filtered down to a frame budget and sent
//! to an annotation server that returns teacher pseudo-labels. The crate
//! replays precomputed frame records (embeddings and detections) rather than
//! decoding images.

pub mod error;
pub mod filter;
pub mod fixtures;
pub mod gate;
pub mod latent;
pub mod model;
pub mod pipeline;
pub mod protocol;

pub use error::{Error, Result};
pub use filter::{filter, FilterConfig, Strategy};
pub use gate::{Decision, GateConfig, GateState};
pub use latent::DensityMetric;
pub use model::{
    frame_confidence, read_oracle, read_stream, write_oracle, write_stream, BBox, CandidateSet,
    Detection, Embedding, FilteredSet, FrameRecord, LabeledFrame, OracleLabels,
};
