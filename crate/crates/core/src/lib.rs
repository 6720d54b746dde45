//! Core library for multi-product defect image generation with a
//! text-conditioned diffusion backbone.
//!
//! The pipeline is organized around a denoiser split into background,
//! defect, and fusion block groups, each driven by its own prompt
//! embedding. Sampling combines three conditional noise predictions into
//! a two-scale guided update, and pixel masks are read off the defect
//! blocks' cross-attention maps through a small convolutional head.

pub mod autodiff;
pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod kvconfig;
pub mod losses;
pub mod maskgen;
pub mod model;
pub mod params;
pub mod schedule;
pub mod train;

pub use conditioning::{ConditionPair, PromptTriple, TextEncoder, Vocabulary, GOOD_LABEL, NULL_TOKEN};
pub use data::{CorpusSpec, DefectSample};
pub use error::{Error, Result};
pub use guidance::{GuidanceConfig, SampleOutput};
pub use losses::LossBreakdown;
pub use maskgen::{BinaryMask, GrayMask};
pub use model::{DenoiserOutput, Tdia, TdiaConfig};
pub use schedule::NoiseSchedule;
pub use train::{TrainConfig, TrainableSystem};

/// Image tensor layout used throughout: channels x height x width, values in [0, 1].
pub type Image = ndarray::Array3<f64>;
/// Ground-truth mask layout: height x width, values in {0.0, 1.0}.
pub type Mask = ndarray::Array2<f64>;
