//! Diffusion-based few-shot class-incremental learning.
//!
//! A frozen text-to-image diffusion backbone provides multi-scale features of
//! four kinds (inversion, synthetic, augmented and generated). An adaptive
//! aggregator fuses them, and a light neck and MLP head are trained against
//! fixed simplex-ETF prototypes across incremental sessions.

pub mod aggregate;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod heads;
pub mod nn;
pub mod prompts;
pub mod protocol;
pub mod rng;
pub mod runner;

pub use aggregate::{AggregatedFeature, Aggregator, FeatureKind};
pub use backbone::{
    Backbone, BackboneHandle, LatentTensor, MultiScaleTaps, NoiseSchedule, PromptEmbedding,
    PromptKind, TapInfo,
};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{RunSummary, SessionResult};
pub use features::{AugSchedule, Extractor, TimestepGrid};
pub use heads::{ConvNeck, EtfPrototypes, HeadConfig, MlpHead, TeacherSnapshot};
pub use prompts::{ClassPromptEmbedding, LabelMap, PromptStore, TemplateSet};
pub use protocol::{
    Benchmark, DatasetLayout, ExemplarMemory, ProtocolConfig, SessionSpec, TrainState,
};
