//! Synthetic CSI dataset generation.
//!
//! A clustered-multipath stochastic model stands in for ray-traced scenes:
//! per-sample randomness derives only from `(master_seed, sample_index)`, so
//! datasets are pure functions of their profile. Frequency-domain channels are
//! transformed to the angular-delay domain (unitary 2-D DFT pair), truncated
//! to the leading delay rows, and normalized into `[0,1]` planes with a
//! per-dataset global affine map.

mod dataset;
mod generate;
mod profile;

pub use dataset::{
    build_dataset, read_dataset, split_counts, write_dataset, CsiSample, Dataset, DatasetMeta,
};
pub use generate::{generate_frequency_channel, to_angular_delay, to_angular_delay_full};
pub use profile::ScenarioProfile;
