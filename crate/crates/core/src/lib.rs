//! Conditional motion-diffusion over 3DMM facial parameter sequences.
//!
//! The crate trains and samples denoising diffusion models on sequences of
//! 3D morphable model coefficients (64 facial + 6 head-pose parameters per
//! frame), conditioned on per-frame audio features, phoneme tokens, a
//! transcript embedding, and the first frame of the sequence. Three models
//! with the same architecture cover the lips (13 dims), facial expression
//! (51 dims), and head pose (6 dims) slices of the parameter vector.
//!
//! Modules, roughly bottom-up:
//!
//! - [`numerics`]: dense f64 tensors, reverse-mode autodiff, Adam
//! - [`motion`]: motion sequences, the 64+6 parameter layout, z-scoring
//! - [`diffusion`]: noise schedule, forward noising, ancestral sampling
//! - [`conditioning`]: condition encoders and cross-attention memory
//! - [`denoiser`]: the transformer denoiser with efficient attention
//! - [`trainer`]: loss composition and the training loop
//! - [`dataset`]: on-disk clip format and the synthetic dataset generator
//! - [`pipeline`]: chunked long-sequence generation and renderer export
//! - [`eval`]: Kabsch-Umeyama alignment and F-LMD/M-LMD metrics

pub mod conditioning;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod eval;
pub mod motion;
pub mod numerics;
pub mod pipeline;
pub mod trainer;

pub use conditioning::{ConditionBundle, ConditionMemory, SegmentLabel};
pub use dataset::{Clip, DatasetManifest, SplitTag, SyntheticSpec};
pub use denoiser::{load_model, save_model, DenoiserConfig, DenoiserModel};
pub use diffusion::{DiffusionSchedule, NoisedSample, ScheduleSpec};
pub use error::{Error, Result};
pub use eval::{EvalReport, LandmarkBasis, LandmarkSequence, SimilarityTransform};
pub use motion::{ModelKind, MotionSequence, NormalizationStats, ParameterLayout};
pub use numerics::{AdamState, Graph, Tensor, Var};
pub use pipeline::{GenerationRequest, GenerationResult, HeadPoseMode, ModelSet};
pub use trainer::{TrainConfig, TrainReport};
