//! Numerical laboratory for minimal KPP front speeds in periodic media with
//! incompressible advection.
//!
//! The crate is organised bottom-up: [`cell`] holds the periodic grid and the
//! sampled coefficient fields, [`discrete`] assembles the linearized operator,
//! [`eigen`] computes its principal eigenvalue and [`speed`] minimizes
//! `k(λ)/λ`. The large-amplitude limit lives in [`varlimit`], streamline
//! diagnostics in [`flowmap`] and the transition-energy computations in
//! [`h1dim`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cell;
pub mod discrete;
pub mod eigen;
mod error;
pub mod flowmap;
pub mod h1dim;
pub mod krylov;
pub mod speed;
pub mod varlimit;

pub use error::{Error, Result};
