pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod halton;
pub mod mdlm;
pub mod model;
pub mod nn;
pub mod params;
pub mod partition;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::RunConfig;
pub use data::{Corpus, TokenSequence, Vocab};
pub use mdlm::{Mdlm, MdlmConfig};
pub use model::{Denoiser, Model, ModelConfig};
pub use partition::{PartitionConfig, PartitionTransformer};
pub use sampling::{SampleOptions, SampleTrace, SamplerKind};
pub use schedule::{CorruptedSequence, GroupAssignment, NoiseSchedule};
