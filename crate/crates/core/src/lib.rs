pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod conlon;
pub mod error;
pub mod generator;
pub mod graph;
pub mod latent;
pub mod metrics;
pub mod midi;
pub mod music;
pub mod rgcn;
pub mod structure;
pub mod tensor;

pub use error::{Error, Result};
