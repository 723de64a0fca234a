//! Learned joint source-channel coding over discrete noisy channels.
//!
//! An encoder network maps each input to per-bit Bernoulli probabilities, a
//! simulated binary channel corrupts the sampled code, and a decoder network
//! reconstructs the input from what was received. Both networks are trained
//! end to end with the multi-sample VIMCO score-function estimator.
//!
//! The crate also carries the classical baseline used for comparison
//! (regular LDPC codes with sum-product decoding), dataset loaders, and the
//! evaluation harness: distortion tables, ideal-code rate arithmetic, decode
//! timing, latent interpolation, Markov-chain sampling and feature
//! extraction.
//!
//! Data-parallel loops (Monte Carlo trials, per-item evaluation, code
//! enumeration) go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and plain iterators otherwise. Results are identical
//! either way: every parallel work item draws from its own RNG stream.

pub mod channel;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod ldpc;
pub mod necst;
pub mod nn;
pub mod par;
pub mod report;

pub use error::{Error, Result};
