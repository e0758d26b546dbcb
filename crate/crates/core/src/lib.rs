pub mod check;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod mem;
mod nn;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod text;
pub mod train;

pub use config::{Branch, CompressorConfig, Layout, ModelConfig, RunConfig, Stage, TaskKind, TextConfig};
pub use encoder::{SyntheticVideoSpec, VideoFeature};
pub use error::{Error, Result};
pub use params::{Group, ModelParams};
pub use tensor::{DType, Graph, PoolConfig, Real, Tensor, Var};
pub use checkpoint::Checkpoint;
pub use mem::MemCacheState;
pub use pipeline::{PipelineOutput, StreamSession, TokenSequence, VidCompress};
pub use text::TextPrompt;
pub use train::{Experiment, TrainReport};
