//! Decoupled diffusion on low-dimensional data.
//!
//! The forward process splits corruption into an analytic attenuation that
//! takes a clean sample to zero (`x₀ + H_t`) and a Wiener process that takes
//! zero to noise (`√t ε`). A two-head network predicts the attenuation
//! parameters `φ` and the noise `ε`; the reverse posterior is then available
//! in closed form for any step size.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attenuation;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod ddpm;
pub mod error;
pub mod forward;
pub mod gradcheck;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod oracle;
pub mod sampler;
pub mod trainer;

pub use attenuation::{AttenuationFamily, Phi};
pub use checkpoint::Checkpoint;
pub use config::{ModelKind, TrainConfig};
pub use datasets::{DatasetName, DatasetSpec};
pub use error::{DdmError, Result};
pub use model::Generator;
pub use numerics::{derive_stream, gaussian, Matrix, RngStream};
pub use objective::{LossConfig, LossType, WeightScheme};
pub use sampler::{Denoiser, DenoiserOutput, SampleTrace, StepSchedule};
pub use trainer::{MetricRow, Trainer};
