//! Fluctuation analytics for risk processes modulated by a finite Markov chain.
//!
//! The process `ξ(t)` drifts downward (or is flat) between jumps, jumps upward by
//! exponentially distributed amounts, and may jump downward by arbitrary
//! atom/Erlang mixtures, both at Poisson epochs and at chain switches. For this
//! class the transform of the process killed at an independent exponential
//! horizon factorizes into matrix-exponential components describing the running
//! supremum and infimum. This crate computes those components numerically:
//!
//! * [`model`] — model definition, validation, generator/resolvent/stationary
//!   quantities, mirroring.
//! * [`spectral`] — the matrix cumulant `Ψ(α)`, its resolvent transform
//!   `Φ(s,α)`, and the real-argument cumulant `K(r)`.
//! * [`inversion`] — recovery of the distribution of `ξ(θ_s)` on a grid, plus
//!   the half-line projection and exponential-smoothing primitives.
//! * [`factorize`] — fixed-point solvers for the supremum/infimum
//!   factorizations, first-passage transforms, and a convolution-based
//!   cross-check of the supremum transform.
//! * [`asymptotics`] — the small-kill-rate limits: the law of the all-time
//!   infimum, ruin curves, and the zero-drift atoms.
//! * [`montecarlo`] — an exact event-driven simulator used as an independent
//!   statistical oracle, with comparison reports.
//! * [`cli`] — the `mawhf` command-line front end.

pub mod asymptotics;
pub mod cli;
mod error;
pub mod factorize;
pub mod inversion;
pub(crate) mod linalg;
pub mod model;
pub mod montecarlo;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
