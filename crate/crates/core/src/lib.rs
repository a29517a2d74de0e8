//! Nearest-neighbor conditional dependence coefficients and the conditional
//! randomization test built on them.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: samples, matrices, tie-break policies and file formats;
//! - [`nn_graph`]: 1-NN graphs (k-d tree and brute force) and their counting statistics;
//! - [`estimators`]: ranks and the coefficient estimators;
//! - [`asymptotics`]: the constants entering the null variances;
//! - [`crt`]: the conditional randomization test and Markov kernels;
//! - [`generators`]: null and alternative samplers with population values;
//! - [`binning_test`]: the discretization-based independence test;
//! - [`experiments`]: declarative, reproducible Monte Carlo studies.

pub mod asymptotics;
pub mod crt;
pub mod data;
pub mod estimators;
pub mod experiments;
pub mod generators;
pub mod nn_graph;
pub mod rng;
pub mod special;
pub mod stats;

pub use data::{dataset_from_columns, DataError, Dataset, Matrix, TieBreak, TieBreakPolicy};
pub use rng::RngStream;
