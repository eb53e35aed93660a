//! Orthogonal low-rank continual adaptation on a toy transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` matrices, parameters, a reverse-mode tape and a
//!   finite-difference gradient checker.
//! - [`adapters`]: LoRA (`A·B`) and AdaLoRA (`A·Λ·B`) increments, per-weight
//!   stacks of frozen past-task adapters, merging.
//! - [`regularizers`]: cross-task orthogonality, AdaLoRA orthonormality and the
//!   combined objectives.
//! - [`rank_alloc`]: sensitivity-based importance, the cubic budget schedule and
//!   global singular-value masking.
//! - [`model`]: a small adapter-bearing transformer block stack.
//! - [`continual`]: synthetic task sequences, per-method stage training and
//!   forgetting metrics.
//! - [`harness`]: run configuration, orchestration, persistence, comparison and
//!   the gradient-check suite.

pub mod adapters;
pub mod continual;
pub mod error;
pub mod exec;
pub mod harness;
pub mod model;
pub mod rank_alloc;
pub mod regularizers;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
