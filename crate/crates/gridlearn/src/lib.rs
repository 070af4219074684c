//! Learn affine surrogates of steady-state AC network behaviour from Monte
//! Carlo power-flow samples, combine them with gradient boosting or bagging,
//! and use the collapsed coefficients to pose dispatch as a convex program.
//!
//! The pipeline: [`case`] parses network data, [`acpf`] solves the nonlinear
//! power flow, [`datagen`] turns repeated solves into regression datasets,
//! [`linmodel`] and [`ensemble`] fit the surrogate models, [`eval`] scores
//! and sweeps them, and [`opf`] builds the surrogate-constrained dispatch
//! problem plus a classical DC baseline.

pub mod acpf;
pub mod case;
pub mod datagen;
pub mod ensemble;
pub mod eval;
pub mod linmodel;
pub mod opf;
pub mod plot;
