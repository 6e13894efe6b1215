//! Entropic vector quantile regression.
//!
//! Entropic vector quantile regression couples a reference measure `mu` on
//! `R^{d_y}` with the joint law `nu` of covariates and responses on
//! `R^{d_x + d_y}`, minimizing quadratic transport cost plus `epsilon` times the
//! KL divergence to the product measure, subject to the conditional
//! mean-independence constraint `E[X | U] = 0`.
//!
//! The crate provides
//!
//! - [`measures`]: discrete marginals, cost matrix, covariate centering and the
//!   invertibility check on the covariate second moment;
//! - [`linalg`]: symmetric-matrix helpers (PSD square roots, SPD solves,
//!   Bures-Wasserstein distance);
//! - [`solver`]: block-coordinate dual ascent on the potentials `(f, g, h)`
//!   with safeguarded Newton or Anderson steps on `h`, plus primal/dual
//!   values, residuals and off-support extensions;
//! - [`oracle`]: a dense global Newton solver used to certify [`solver`];
//! - [`gaussian`]: closed-form solution for Gaussian marginals and its
//!   small-`epsilon` behaviour;
//! - [`cli`]: the command-line front end.

pub mod cli;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod measures;
pub mod oracle;
pub mod solver;

pub use error::{Error, Result};
pub use gaussian::{GaussianCoupling, GaussianModel, GaussianPotentials};
pub use linalg::SymMatrix;
pub use measures::{DiscreteMeasure, Problem, ValidationReport};
pub use oracle::{OracleComparison, OracleResult};
pub use solver::{Coupling, Potentials, Solution, SolveReport, SolverOptions};
