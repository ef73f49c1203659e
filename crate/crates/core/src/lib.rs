//! Zero-shot anomaly detection with learned prompts over a frozen
//! vision-language encoder.

pub mod autodiff;
pub mod cnf;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod export;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod resample;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
