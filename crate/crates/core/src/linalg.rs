//! Small dense symmetric-matrix utilities.
//!
//! Dimensions here are small (a few dozen at most), so everything goes
//! through a full symmetric eigendecomposition or a Cholesky factorization.
//! Tolerances are relative to the trace or the largest eigenvalue so that
//! results do not depend on the scale of the input.

use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues down to `-PSD_TOL * lambda_max` are treated as zero.
pub const PSD_TOL: f64 = 1e-12;
/// Cholesky pivots below `PIVOT_TOL * trace / d` are treated as singular.
pub const PIVOT_TOL: f64 = 1e-14;

/// Dense symmetric matrix. Symmetry is checked and then enforced exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Accepts `a` if `max|a - a^T| <= 1e-12 * max|a|`, then stores `(a + a^T) / 2`.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
        }
        let scale = a.amax();
        let asymmetry = (&a - a.transpose()).amax();
        if asymmetry > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric { asymmetry });
        }
        Ok(Self::symmetrize(a))
    }

    /// Symmetrizes without checking. For matrices that are symmetric by construction.
    pub fn symmetrize(a: DMatrix<f64>) -> Self {
        let s = (&a + a.transpose()) * 0.5;
        SymMatrix(s)
    }

    pub fn identity(d: usize) -> Self {
        SymMatrix(DMatrix::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Cholesky factorization with a relative pivot check.
    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        let d = self.dim();
        if d == 0 {
            return Cholesky::new(self.0.clone())
                .ok_or_else(|| Error::SingularMatrix("empty matrix".into()));
        }
        let chol = Cholesky::new(self.0.clone()).ok_or_else(|| {
            Error::SingularMatrix("Cholesky factorization failed (not positive definite)".into())
        })?;
        let floor = PIVOT_TOL * self.trace().abs() / d as f64;
        let l = chol.l_dirty();
        for k in 0..d {
            let pivot = l[(k, k)] * l[(k, k)];
            if pivot.is_nan() || pivot <= floor {
                return Err(Error::SingularMatrix(format!(
                    "Cholesky pivot {pivot:e} at index {k} below {floor:e}"
                )));
            }
        }
        Ok(chol)
    }

    /// Inverse of a positive definite matrix.
    pub fn spd_inverse(&self) -> Result<SymMatrix> {
        Ok(SymMatrix::symmetrize(self.cholesky()?.inverse()))
    }

    /// `log det` of a positive definite matrix, as `2 * sum(log diag(L))`.
    pub fn log_det(&self) -> Result<f64> {
        let chol = self.cholesky()?;
        let l = chol.l_dirty();
        Ok((0..self.dim()).map(|k| 2.0 * l[(k, k)].ln()).sum())
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

/// Symmetric PSD square root by eigendecomposition.
///
/// Negative eigenvalues down to `-1e-12 * lambda_max` are clamped to zero, and
/// so are positive eigenvalues at the roundoff level `d * eps_mach * lambda_max`,
/// which keeps the square root of a singular matrix singular.
pub fn psd_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let d = a.dim();
    if d == 0 {
        return Ok(a.clone());
    }
    let eig = SymmetricEigen::new(a.as_matrix().clone());
    let lambda_max = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v));
    let neg_tol = PSD_TOL * lambda_max;
    let noise = d as f64 * f64::EPSILON * lambda_max;
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -neg_tol || !v.is_finite() {
            return Err(Error::NotPsd { min_eig: *v, tol: -neg_tol });
        }
        *v = if *v <= noise { 0.0 } else { v.sqrt() };
    }
    let q = &eig.eigenvectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok(SymMatrix::symmetrize(s))
}

/// Solves `A X = B` for positive definite `A` via Cholesky.
pub fn sym_solve(a: &SymMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != a.dim() {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side has {} rows, matrix is {}x{}",
            b.nrows(),
            a.dim(),
            a.dim()
        )));
    }
    Ok(a.cholesky()?.solve(b))
}

/// Squared 2-Wasserstein distance between centered Gaussians with covariances
/// `a` and `b`: `tr a + tr b - 2 tr (a^{1/2} b a^{1/2})^{1/2}`.
///
/// Both arguments may be singular.
pub fn bures_w2_squared(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "Bures distance between {}x{} and {}x{} matrices",
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    let ra = psd_sqrt(a)?;
    let cross = SymMatrix::symmetrize(ra.as_matrix() * b.as_matrix() * ra.as_matrix());
    let fidelity = psd_sqrt(&cross)?.trace();
    Ok((a.trace() + b.trace() - 2.0 * fidelity).max(0.0))
}
