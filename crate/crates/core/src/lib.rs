//! Training-free subject consistency for batched attention: masked
//! cross-image attention sharing, regional feature harmonization, base layout
//! interpolation and attention-map subject masks, driven by a deterministic
//! toy denoiser with planted subject regions.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! pipeline runs in `f64`.

pub mod attention;
pub mod bli;
pub mod dump;
pub mod error;
pub mod linalg;
pub mod masking;
pub mod metrics;
pub mod pipeline;
pub mod rfh;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use linalg::{AdditiveMask, Matrix};
pub use masking::{AttentionMap, GridShape, PropagationMask, SubjectMask, ThresholdMethod};
pub use metrics::MetricReport;
pub use pipeline::{run, run_with, Engine, RunConfig, RunOptions, RunResult, Toggles};
pub use rng::SplitMix64;
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type AttentionMap64 = AttentionMap<f64>;
pub type BatchQkv64 = attention::BatchQkv<f64>;
pub type EmbeddingCache64 = bli::EmbeddingCache<f64>;
pub type CorrespondenceTable64 = rfh::CorrespondenceTable<f64>;
