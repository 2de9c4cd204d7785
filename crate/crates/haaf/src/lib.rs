//! Multimodal multiple-instance learning: bags of instance images plus one
//! tabular vector per bag, classified by transformer aggregation whose
//! aggregation token and bag-level classifier are generated per bag by a
//! hypernetwork conditioned on the tabular data.
//!
//! The crate ships its own reverse-mode autodiff engine ([`tensor`]), the
//! model zoo ([`models`]) from plain tabular MLPs up to the full
//! hypernetwork-adaptive transformer, a condition-dependent synthetic
//! benchmark ([`data`]), a training/evaluation harness ([`train`],
//! [`metrics`]), and batch commands ([`commands`]) behind the `haaf` binary.
//!
//! Start with the runnable programs in `examples/`.

pub mod commands;
pub mod data;
pub mod hypernet;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Real, Tensor, TensorError, Var};
