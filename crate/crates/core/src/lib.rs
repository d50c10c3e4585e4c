//! Background subtraction for depth video with a patch-classifying
//! convolutional network.
//!
//! The pipeline: normalize 16-bit depth with the sequence range
//! ([`preprocess`]), average the valid observations into a background,
//! sample two-channel (frame, background) patches labeled from ground truth
//! ([`patches`]), train the classifier with RMSprop ([`trainer`]), score
//! every pixel ([`infer`]) and evaluate the masks ([`metrics`]).

pub mod depth_io;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod patches;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
