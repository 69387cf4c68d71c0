//! Multichannel audio-visual self-supervised pre-training at desk scale.
//!
//! A shared convolutional audio encoder runs over every microphone channel,
//! a small visual encoder runs over lip frames, and the streams are fused
//! by concatenation, span-masked and passed through a transformer. Training
//! contrasts the context output against the fused features (intra-channel),
//! against each channel's own features (inter-channel) and, for audio-only
//! batches, against single-channel features. A CTC head turns the
//! pre-trained stack into a recognizer.

pub mod autodiff;
pub mod beamform;
pub mod context_encoder;
pub mod ctc;
pub mod data_synth;
pub mod encoders;
mod error;
pub mod fusion_mask;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
