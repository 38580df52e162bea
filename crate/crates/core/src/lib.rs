//! Ransomware detection from dynamic-analysis ASM traces.
//!
//! Traces are parsed into instructions, normalized and cut into functions,
//! deduplicated and filtered so that no function is shared across labels or
//! between training and evaluation data. A subword tokenizer and a small
//! transformer classify each function; a linear SVM over per-sample
//! aggregates gives the sample verdict.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod normalize;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tokenizer;
pub mod trace;
pub mod verdict;
pub mod zipf;

pub use config::PipelineConfig;
pub use error::{PulseError, Result};
pub use model::{Attention, ClassifierModel, FunctionVerdict, ModelConfig, Pooling};
pub use normalize::{NormalizationMode, NormalizedFunction, Style};
pub use pipeline::{run_pipeline, Pipeline, PipelineRun, Stage};
pub use scalar::Scalar;
pub use synth::{generate_synthetic_corpus, SyntheticSpec};
pub use tokenizer::{TokenSequence, TokenizerModel};
pub use trace::{Instruction, Label, RawSample, Split};
pub use verdict::{Decision, Metrics, SampleFeatures, SizeClass};

/// Single-precision classifier used for training and checkpoints.
pub type Model = model::ClassifierModel<f32>;
/// Double-precision classifier used for gradient checks.
pub type WideModel = model::ClassifierModel<f64>;
pub type Hyperplane = verdict::Hyperplane<f64>;
pub type Hyperplane32 = verdict::Hyperplane<f32>;
pub type PowerLawFit = zipf::PowerLawFit<f64>;
