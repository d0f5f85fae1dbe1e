//! Spoofing countermeasure training and evaluation on raw waveforms.

pub mod adversary;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod runtime;
pub mod sincfront;

pub use error::{Error, Result};
