pub mod clustering;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod pretrain;
pub mod repro;
pub mod rng;

pub use error::{Error, Result};
