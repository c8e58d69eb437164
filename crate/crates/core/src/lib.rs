//! Benchmark toolkit for CSI-feedback compression autoencoders.
//!
//! The crate is organized around the lifecycle of a feedback codec:
//!
//! - [`autodiff`] — dense-tensor reverse-mode automatic differentiation engine
//!   providing the layer primitives the codec families are built from.
//! - [`channel`] — deterministic synthetic CSI dataset generator (clustered
//!   multipath, angular-delay preprocessing, normalization, binary dataset IO).
//! - [`codec`] — the four autoencoder families (MLP, CNN, dilated CNN,
//!   attention) plus FLOPs/parameter accounting and the non-AI fallback codec.
//! - [`train`] — mini-batch Adam training, fine-tuning, and checkpointing.
//! - [`eval`] — NMSE/SGCS metrics and the four-case generalization protocol.
//! - [`lcm`] — model registry, NMSE monitoring, and the
//!   activate/switch/fallback decision loop.

pub mod autodiff;
pub mod channel;
pub mod codec;
pub mod error;
pub mod eval;
pub mod lcm;
pub mod train;
pub mod util;

pub use error::{Error, Result};
