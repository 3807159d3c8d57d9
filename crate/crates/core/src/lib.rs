//! Cross-stage attention residuals (XAttnRes) for a mini U-Net.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, kernels and a
//!   finite-difference gradient checker;
//! - [`xattnres`]: the feature history pool and pseudo-query attention;
//! - [`backbone`]: the configurable encoder-decoder network;
//! - [`training`]: losses, AdamW, augmentation and the train/evaluate loops;
//! - [`metrics`]: Dice, IoU and HD95 with brute-force oracles;
//! - [`data`]: synthetic datasets, PGM files, checkpoints and CSV output;
//! - [`experiment`]: configuration files and the run/ablate/inspect drivers.

pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod xattnres;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
