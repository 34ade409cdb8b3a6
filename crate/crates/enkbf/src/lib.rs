//! Localized ensemble Kalman-Bucy filter (l-EnKBF) for spatially extended
//! stochastic systems.
//!
//! The crate is organized around the pipeline of a twin experiment:
//!
//! * [`model`] — drift models (Lorenz 96 and its soft-truncated variant),
//!   short-range Lipschitz metadata, and the canonicalizing transformation
//!   that reduces a general linear observation setup to the unit-noise,
//!   identity-observation form.
//! * [`dynamics`] — Euler-Maruyama simulation of the truth SDE and the
//!   observation increment stream, with a replayable on-disk format.
//! * [`locmat`] — localization (taper) matrices, Schur products, diagonal
//!   inverses, and the matrix norms used throughout.
//! * [`filter`] — the l-EnKBF particle update, ensemble statistics, and
//!   full assimilation runs with covariance diagnostics.
//! * [`theory`] — closed-form stability bounds, the Riccati solution,
//!   Lyapunov weights, and diagnostic rates used as oracles and monitors.
//! * [`verify`] — randomized self-check suites backing the `verify` CLI
//!   subcommand.

pub mod dynamics;
pub mod error;
pub mod filter;
pub mod locmat;
pub mod model;
pub mod theory;
pub mod verify;

pub use error::{Error, Result};
