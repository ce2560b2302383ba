//! voxsynth: volumetric cross-modal synthesis.
//!
//! The crate trains a 3-D encoder–decoder network to regress one volumetric
//! modality from another, compares it against a local patch-based CNN
//! baseline, scores both with volumetric quality metrics, and probes the
//! synthesized volumes' downstream value with a small classification harness.
//! A seeded phantom generator produces paired datasets so the whole pipeline
//! can be exercised end to end on a desktop machine.

pub mod error;
pub mod scalar;
pub mod rng;

pub mod volume;
pub mod nifti;
pub mod rvol;
pub mod pgm;

pub mod tensor;

pub mod nn;
pub mod optim;
pub mod unet;
pub mod checkpoint;
pub mod classify;
pub mod dataset;
pub mod patch;
pub mod phantom;
pub mod metrics;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use volume::{LabelVolume, Volume};
