//! Verifiable-reward policy training with meta-experience internalization.
//!
//! The engine couples group-relative policy optimization (binary rewards,
//! group-normalized advantages, clipped surrogate) with a contrastive
//! meta-experience pipeline: paired successful/failed rollouts are analyzed
//! into bifurcation + critique + heuristic records, validated by hinted
//! replay, and internalized through a likelihood term added to the policy
//! objective. Everything runs on a synthetic modular-arithmetic task family
//! with an exact verifier, a log-linear toy policy with analytic gradients,
//! and counter-based RNG so whole runs replay bit-for-bit.

pub mod config;
pub mod error;
pub mod eval;
pub mod export;
pub mod grpo;
pub mod internalize;
pub mod metaexp;
pub mod policy;
pub mod rng;
pub mod taskenv;
pub mod trainer;

pub use error::{MelError, Result};
