//! Ensemble adversarial training laboratory on small dense networks.
//!
//! The crate covers the numeric substrate ([`nn`]), synthetic and IDX data
//! ([`datasets`]), l-infinity attacks ([`attacks`]), ensemble semantics and the
//! secure-set partition ([`ensemble`]), the collaborative training losses
//! ([`training`]), post-training metrics and detection ([`analysis`]), and the
//! experiment runner behind the `cce` binary ([`cli`]).

pub mod analysis;
pub mod attacks;
pub mod classifier;
pub mod cli;
pub mod datasets;
pub mod ensemble;
pub mod error;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod training;

pub use classifier::Classifier;
pub use ensemble::Ensemble;
pub use error::{Error, Result};
pub use nn::Model;
pub use tensor::Tensor;
