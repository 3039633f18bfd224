//! Test-time training with mixed test/training inputs.
//!
//! A split network (encoder plus main and auxiliary heads) is pretrained on
//! clean data, then adapted per test sample by gradient steps on a
//! self-supervised auxiliary loss. With mixing enabled the adaptation batch
//! interpolates the test sample with randomly drawn training samples.

pub mod analysis;
pub mod aux_tasks;
pub mod data;
pub mod engine;
pub mod error;
pub mod format;
pub mod mixup;
pub mod network;
pub mod tensor;

pub use aux_tasks::{AuxTaskSpec, TaskKind, TrainFeatureStats};
pub use data::{CorruptionKind, CorruptionSpec, Dataset, SynthSpec};
pub use engine::{
    EpisodeConfig, EpisodeMode, EpisodeResources, EpisodeResult, ErrorTable, Method,
    PretrainConfig, StepRecord,
};
pub use error::{Error, Result};
pub use mixup::{Granularity, MixupRatioSpec, TrainPartnerPool};
pub use network::{
    build_network, Activation, LayerSpec, Mode, NetworkSpec, ParamSubset, ParameterImage,
    SplitNetworkState,
};
pub use tensor::Tensor;
