//! Desk-scale Mixture-of-Experts inference with post-training expert-level
//! sparsification.
//!
//! The crate implements a small MoE stack (top-k softmax routing over SwiGLU
//! experts in pre-norm residual blocks) together with the two sparsification
//! procedures built on it:
//!
//! * **Expert pruning** ([`pruning`]): cache each layer's input/output token
//!   pairs over calibration data, exhaustively enumerate r-expert subsets per
//!   layer, and keep the subset with the lowest Frobenius reconstruction
//!   loss. Random and frequency baselines and a progressive (prefix-aware)
//!   variant are included.
//! * **Dynamic expert skipping** ([`skipping`]): at inference, drop selected
//!   experts whose routing weight falls below a per-layer threshold
//!   calibrated as the median observed weight ratio.
//!
//! Everything is deterministic from explicit seeds ([`numerics::Prng`]), so
//! models with planted ground truth ([`modelgen`]) make the searches
//! verifiable: dead experts must be dropped at zero loss, domain specialists
//! must survive domain-specific calibration, and analytic parameter
//! accounting ([`accounting`]) must reproduce the reference-model ratios.
//!
//! Start with the runnable examples (`cargo run --example prune_planted_model`)
//! or the `moe-sparsity` binary, whose subcommands wrap the library one
//! workflow step each.

pub mod accounting;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod modelgen;
pub mod moe;
pub mod numerics;
pub mod pruning;
pub mod skipping;

pub use error::{Error, Result};
