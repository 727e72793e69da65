//! Gated Res2Net (GRes2Net) for multivariate time series.
//!
//! The crate is self-contained: a rank-3 tensor type with a reverse-mode
//! tape ([`tensor`], [`tape`]), layers and an LSTM baseline ([`nn`]), the
//! plain and gated Res2Net blocks ([`res2net`]), full models ([`model`]),
//! training with Adam and early stopping ([`train`]), evaluation criteria
//! ([`metrics`]), CSV ingestion and synthetic tasks ([`data`]), and the
//! command-line surface with its file formats ([`cli`]).

pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
mod ops;
pub mod res2net;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tape::{GradTape, Gradients, Var};
pub use tensor::{Shape, Tensor3, TensorError};
