//! Free-energy posterior network on synthetic 2-D scenes.
//!
//! A pair of class-conditional coupling-block flows turns backbone features
//! into exact log-densities; those parameterize a per-cell Beta posterior
//! whose variance and differential entropy score out-of-distribution
//! regions. Training minimizes the BUCE objective (cross-entropy + scaled
//! uncertainty cross-entropy + variance-consistency BCE + an outlier
//! variance term), with gradients checked against central differences.

pub mod beta;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod parallel;
pub mod special;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
