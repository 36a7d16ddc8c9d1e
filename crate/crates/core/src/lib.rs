//! Round-interleaved privacy protection for federated learning.
//!
//! This crate is `no_std` (it needs `alloc`) and holds every numerical piece of
//! the simulator: a small neural-network engine with per-sample gradients,
//! DP-SGD and an RDP accountant, selective homomorphic aggregation over a
//! sensitivity mask, the FedAvg round loop with the MP / PI / SI-DP / SI-HE
//! schedules, four reconstruction attacks, privacy-level extraction from
//! attack-success matrices, and threshold-based method selection.
//!
//! File formats, the CLI and parallel sweeps live in the `altfl` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod accountant;
pub mod attack;
pub mod data;
pub mod dp;
pub mod fl;
pub mod he;
pub mod levels;
pub mod model;
pub mod rng;
pub mod selection;

pub use accountant::{rdp_epsilon, BudgetReport};
pub use data::{Dataset, Provenance};
pub use dp::{clip, dp_sgd_step, DpParams};
pub use fl::{InterleaveRatio, Method, ProtectionConfig, RunRecord};
pub use he::{EncryptionMask, HeCostModel, SimulatorBackend};
pub use model::{apply_step, init_model, Batch, ModelArch, ParameterVector};

/// Clipping norm used throughout the reference experiments.
pub const DEFAULT_CLIP_NORM: f64 = 4.7;
