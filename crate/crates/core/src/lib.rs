//! Off-policy temporal-difference testbed on finite MDPs.
//!
//! The crate has three layers:
//!
//! * the model layer — finite MDPs, policies, induced chains, and the
//!   λ-Bellman algebra ([`mdp`]), together with the analytic expected-update
//!   systems and their spectral stability verdicts ([`spectral`]);
//! * the sampling layer — trace-based TD learners driven by a seeded,
//!   reproducible chain walk ([`learners`]);
//! * the diagnostics layer — the learning-rate clock, scaled interpolated
//!   iterates, reference ODE solutions with discretization errors ([`ode`]),
//!   and empirical noise-averaging checks ([`diagnostics`]).
//!
//! [`experiments`] wires the layers into a reproducible harness with bundled
//! environments (including the star-shaped divergence instance) and file
//! outputs; the `odesa` binary exposes it on the command line.

pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod learners;
pub mod mdp;
pub mod ode;
pub mod spectral;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
