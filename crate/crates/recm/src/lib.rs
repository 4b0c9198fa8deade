//! Per-layer learned relaxation of equivariance constraints, driven by a
//! recurrently updated optimization state, together with exact
//! optimal-transport oracles that certify its convergence guarantees.
//!
//! The crate is organized as:
//! - [`tensor`]: dense f64 tensors with reverse-mode differentiation,
//! - [`groups`]: finite and compact matrix groups, representations,
//!   generating sets, Haar sampling,
//! - [`equivariant`]: exactly equivariant linear maps and the
//!   unconstrained relaxation terms,
//! - [`modulation`]: the relaxed layer with its recurrent state,
//!   learned update network, and pruning,
//! - [`transport`]: empirical distributions, exact 1-Wasserstein
//!   distance, symmetrization, and the verification reports,
//! - [`experiments`]: synthetic tasks, model assembly, and the training
//!   loop with trajectory logging,
//! - [`cli`]: the batch command-line surface.

pub mod cli;
pub mod equivariant;
pub mod error;
pub mod experiments;
pub mod groups;
pub mod modulation;
pub mod tensor;
pub mod transport;

pub use error::RecmError;
pub use tensor::Tensor;

/// The crate-wide seeded RNG. All randomness flows through explicitly
/// seeded instances so runs are reproducible from their config alone.
pub type Rng = rand_chacha::ChaCha12Rng;
