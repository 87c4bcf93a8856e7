//! Experiment harness: configuration files, synthetic shape datasets, image
//! files and the training/comparison runners behind the `eqimaging` binary.

pub mod config;
pub mod experiment;
pub mod imageio;
pub mod synth;
