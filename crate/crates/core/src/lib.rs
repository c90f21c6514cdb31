//! Context-aware fallacy classification over text and audio: a small
//! reverse-mode tensor engine, transformer encoders, context fusion
//! architectures, an audio preprocessing pipeline, late-fusion ensembling
//! and the training/ablation harness.

pub mod audio;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod labels;
pub mod nn;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::{FallacyClass, Logits, NUM_CLASSES};
