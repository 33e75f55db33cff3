//! Similarity-regularized classifier training on the CPU.
//!
//! A supervised classifier `fc(f1(x))` is trained with an auxiliary loss that
//! pulls together the representations of two augmentations of the same
//! image, measured through a projector/predictor pair against a
//! momentum-averaged target network. See the README for the command-line
//! front end.

pub mod archive;
pub mod augmentation;
pub mod config;
pub mod data;
mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod schedulers;
pub mod siamese;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
