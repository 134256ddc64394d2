//! Desk-scale self-supervised speech representation learning.
//!
//! A teacher–student encoder is pretrained with an in-utterance contrastive
//! objective: the student sees noisy, SpecAugment-masked log-mel input, the
//! teacher sees clean input with a random positional shift and tracks the
//! student by an exponential moving average. A HuBERT-style masked
//! predictive objective with k-means targets is available as an alternative.
//! Everything runs on the CPU on top of a small reverse-mode autodiff engine.

pub mod augment;
pub mod cli;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
