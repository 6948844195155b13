//! Training-free defense against adversarial images for vision-language
//! inference.
//!
//! An input image is first checked for embedding consistency under a set of
//! content-preserving transformations ([`transforms`], [`detection`]). Most
//! clean images stop there and are captioned once. Suspect images are
//! captioned once per view; if the captions disagree in a text-embedding
//! space, an external LLM consolidates them into one caption
//! ([`consolidation`]). [`pipeline::Defender`] wires the stages together,
//! [`calibration`] derives both thresholds from clean data, and
//! [`synthetic`] provides a deterministic world with ground-truth labels for
//! offline testing.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod calibration;
pub mod cli;
pub mod clients;
pub mod config;
pub mod consolidation;
pub mod detection;
pub mod eval;
pub mod pipeline;
pub mod raster;
pub mod responses;
pub mod serve;
pub mod synthetic;
pub mod transforms;

pub use calibration::{CalibrationProfile, ThresholdEstimate};
pub use clients::Clients;
pub use detection::{EmbeddingVector, Verdict, VerdictLabel};
pub use pipeline::{Defender, PipelineConfig, PipelineResult, Route};
pub use raster::RasterImage;
pub use responses::ResponseSet;
pub use transforms::{TransformKind, TransformSpec};
