//! Neural-network calibration of rough and classical stochastic volatility
//! models: Monte Carlo ground truth, surface networks, solvers and a model
//! classifier. The guide in `book/` walks through the pipeline.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod black_scholes;
pub mod calibrate;
pub mod classifier;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod mc_engine;
pub mod models;
pub mod neuralnet;
mod normal;

pub use error::{Error, Result};

// One module per book chapter, so `cargo test --doc` runs the book's
// examples and a failure names the chapter it came from.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/command_line.md")]
    pub mod command_line {}
    #[doc = include_str!("../../../book/src/black_scholes.md")]
    pub mod black_scholes {}
    #[doc = include_str!("../../../book/src/monte_carlo.md")]
    pub mod monte_carlo {}
    #[doc = include_str!("../../../book/src/networks.md")]
    pub mod networks {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    pub mod calibration {}
    #[doc = include_str!("../../../book/src/classifier.md")]
    pub mod classifier {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub mod reproducibility {}
}
