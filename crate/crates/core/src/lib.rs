//! Embedding-conditioned domain simulation for speech data.

pub mod analysis;
pub mod audio;
pub mod config;
pub mod discriminator;
pub mod encoders;
pub mod enhance;
pub mod error;
pub mod generator;
pub mod layers;
pub mod objectives;
pub mod pipeline;
pub mod scenario;
pub mod spectral;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
