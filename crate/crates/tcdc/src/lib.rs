//! Task-aware learned image compression.
//!
//! A mean-scale hyperprior codec trained jointly with an image classifier
//! under a weighted rate, distortion and cross-entropy objective, plus the
//! tooling to measure rate–accuracy trade-offs from real bitstreams.

pub mod classifier;
pub mod codec;
pub mod config;
pub mod data;
pub mod entropy;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use tensor::Tensor;
