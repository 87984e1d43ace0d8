//! Learning reduced slow dynamics of slow-fast stochastic systems.
//!
//! The pipeline runs in stages:
//!
//! 1. [`sde`]: simulate short-term ensembles of a slow-fast system.
//! 2. [`km`]: identify drift and diffusion of the slow equations from the
//!    ensemble's difference quotients over a polynomial [`basis`].
//! 3. [`neural`] + [`autosde`]: train an encoder/LSTM/decoder predictor
//!    whose loss combines reconstruction of the observed window with an
//!    extension by the identified SDE, and roll the ensemble forward until
//!    its distribution settles.
//! 4. [`manifold`]: fit the invariant manifold `y = ĥ(x)` to the settled
//!    snapshot and build the reduced slow SDE.
//! 5. [`evaluate`]: compare reduced and original slow dynamics.
//!
//! [`config`] describes an experiment, [`pipeline`] runs the stages in
//! memory and [`stages`] runs them against an artifact directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod autosde;
pub mod basis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod km;
pub mod manifold;
pub mod neural;
pub mod pipeline;
pub mod regression;
pub mod rng;
pub mod sde;
pub mod serde_rows;
pub mod stages;

pub use error::{Error, Result};
