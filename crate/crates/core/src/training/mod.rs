//! Losses, the optimizer, augmentation, and the train/evaluate loops.

mod augment;
mod loss;
mod optim;
mod trainer;

pub use augment::{augment, Transform};
pub use loss::{combined_loss, LossWeights};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{evaluate, predict, train, train_with, EpochRecord, TrainConfig, TrainedModel};
