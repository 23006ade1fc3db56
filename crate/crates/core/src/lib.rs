//! DeepStamp: learned visible watermarking for image classification datasets.
//!
//! The library trains a watermarking network to synthesize a per-image
//! variant of a given watermark such that classifiers trained on the stamped
//! images lose minimal accuracy, the watermark stays clearly visible, and
//! per-image variation makes blind removal attacks unreliable. It also ships
//! the static / opacity / displacement baseline schemes and an evaluation
//! harness that compares classifier accuracy across all of them.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod nets;
pub mod seeds;
pub mod stamping;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
