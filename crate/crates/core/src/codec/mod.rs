//! CSI autoencoder families, complexity accounting, and the fallback codec.
//!
//! Four families share the encoder/decoder contract: the encoder maps a
//! `[2, n_delay, n_angle]` sample to a `codeword_length` vector, the decoder
//! maps it back to `[0,1]`-clamped planes. All weights derive deterministically
//! from the spec's `init_seed`.

mod attention;
mod checkpoint;
mod cnn;
mod complexity;
mod dilated;
mod fallback;
mod layers;
mod mlp;
mod model;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use complexity::{count_complexity, ComplexityReport, LayerCost};
pub use fallback::{fallback_decode, fallback_encode, FallbackGeometry};
pub use model::{batch_from_samples, ForwardPass, Model};
pub use spec::{Family, Knobs, ModelSpec, Provenance, Ratio};

/// Slope of every leaky ReLU in the codec families.
pub(crate) const LEAKY_ALPHA: f64 = 0.3;
/// Batch/layer normalization epsilon and batchnorm momentum.
pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;
