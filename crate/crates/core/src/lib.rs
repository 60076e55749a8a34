//! Audio-conditioned diffusion with gated cross-attention adapters on a frozen
//! denoising backbone, trained and evaluated on a synthetic audio-image dataset.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod editing;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod projector;
pub mod sampling;

pub use error::{Error, Result};
pub use checkpoint::{Checkpoint, Stage};
pub use config::RunConfig;
pub use data::{AudioClip, DatasetSplit, ImageSample, PairedExample};
pub use diffusion::{AdapterState, InsertionSet};
pub use editing::DiffusionTrajectory;
pub use metrics::MetricsReport;
pub use projector::{AudioEmbedding, AudioTokens};
pub use sampling::{CfgFormulation, GuidanceConfig};
