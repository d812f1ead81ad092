//! Minimal reverse-mode differentiation engine for dense f64 networks.
//!
//! The pieces fit together like this: [`Matrix`] is plain storage, [`Graph`]
//! is a single-use tape of eagerly evaluated ops, [`ParamStore`] owns the
//! trainable arrays between passes, and [`Adam`] updates subsets of a store.
//! [`DenseLayer`] and [`BatchNorm`] wrap the tape ops with shape validation
//! and parameter bookkeeping, and [`grad_check`] compares any scalar loss
//! against central finite differences.
//!
//! A graph is single-threaded by construction; independent graphs never share
//! state and may run on separate threads freely.

mod error;
mod gradcheck;
mod graph;
mod layers;
mod matrix;
mod params;

pub use error::{GradError, Result};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use graph::{Graph, Node, UnaryFn, LEAKY_RELU_SLOPE, SELU_ALPHA, SELU_LAMBDA};
pub use layers::{mse, Activation, BatchNorm, DenseLayer, ParamMode};
pub use matrix::Matrix;
pub use params::{Adam, ParamId, ParamStore};
