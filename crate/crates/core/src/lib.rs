//! Ladder-side mixture-of-experts glyph recognition.
//!
//! A frozen patch transformer carries gated mixture-of-experts adapters at a
//! few of its layers; a single-layer decoder trained with permutation masks
//! (then an ordered-mask fine-tuning phase) turns the features into category
//! tokens. Around the model sit a synthetic long-tailed glyph corpus, the
//! column-wise page transcription procedure, the evaluation metrics, and the
//! expert-activation analysis.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod raster;
pub mod seeds;
pub mod syndata;
pub mod tensor;
pub mod training;
pub mod transcribe;

pub use config::{DecoderConfig, EncoderConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Recognizer;
pub use tensor::Tensor;
