//! Drive-by vibration simulation and per-sleeper railpad/ballast stiffness
//! estimation with hand-written LSTM, BiLSTM and 1-D convolution models.

pub mod datagen;
pub mod error;
pub mod framing;
mod gemm;
pub mod layers;
pub mod models;
pub mod numcore;
pub mod simkit;
pub mod training;

pub use datagen::{Dataset, DatasetRecord, GenerateSpec, ScenarioKind, ScenarioMix, StiffnessRanges};
pub use error::{Error, Result};
pub use framing::{frame, FrameSequence};
pub use models::{ArchSpec, InputNorm, Model, ModelCheckpoint};
pub use numcore::ParamTensor;
pub use simkit::{AbaRecord, TrackModelConfig, TrackProfile};
pub use training::{MetricsReport, NormSpec, TrainConfig};
