//! IO and tooling around `lightswap-core`: the FSWT weights format,
//! checkpoints, PPM images, run configuration, loss curves, the training
//! loop, face swapping, benchmarking, triplet forging and the CLI.

pub mod bench;
pub mod cli;
pub mod config;
pub mod curves;
pub mod data;
pub mod error;
pub mod forge;
pub mod models;
pub mod ppm;
pub mod swap;
pub mod train_loop;
pub mod weights;

pub use error::{Error, Result};
