//! Quantized Bayesian neural networks trained with mean-field stochastic
//! variational inference.
//!
//! The crate covers the whole experimental loop: a small reverse-mode
//! autodiff engine ([`autodiff`]), uniform and logarithmic quantizers with
//! straight-through gradients ([`quant`]), Gaussian variational layers that
//! place those quantizers on the variational parameters and/or the sampled
//! weights ([`bnn`]), two-phase training ([`svi`]), uncertainty
//! decomposition and AUROC scoring ([`uncertainty`]), dataset ingestion
//! ([`data`]) and the experiment harness behind the `qbnn` CLI ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bnn;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod quant;
pub mod rng;
pub mod svi;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Number of output classes of every model in this crate.
pub const NUM_CLASSES: usize = 10;
/// Flattened 28×28 input width.
pub const INPUT_DIM: usize = 784;
