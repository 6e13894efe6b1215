//! Discrete marginals and problem data.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

/// Weights must sum to one within this tolerance.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Relative spectral threshold on the covariate second moment.
pub const RANK_TOL: f64 = 1e-10;

/// Finitely supported probability measure. Row `k` of `points` is atom `k`.
///
/// For a measure on `(x, y)`-space the covariate block comes first.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    weights: DVector<f64>,
    points: DMatrix<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure, dropping zero-weight atoms.
    pub fn new(weights: Vec<f64>, points: DMatrix<f64>) -> Result<Self> {
        if weights.len() != points.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} atoms",
                weights.len(),
                points.nrows()
            )));
        }
        if let Some(k) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "weight {} at atom {k} is negative or not finite",
                weights[k]
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {total:.17}, not 1")));
        }
        if let Some((k, _)) = points
            .row_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("coordinates of atom {k}")));
        }

        let keep: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] > 0.0).collect();
        if keep.is_empty() {
            return Err(Error::InvalidWeights("no atom with positive weight".into()));
        }
        if keep.len() < weights.len() {
            log::info!("dropping {} zero-weight atoms", weights.len() - keep.len());
        }
        let weights = DVector::from_iterator(keep.len(), keep.iter().map(|&k| weights[k]));
        let points = points.select_rows(keep.iter());
        Ok(Self { weights, points })
    }

    /// Uniform weights over the given atoms.
    pub fn uniform(points: DMatrix<f64>) -> Result<Self> {
        let n = points.nrows();
        Self::new(vec![1.0 / n as f64; n], points)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    /// Weighted mean of columns `cols`.
    fn block_mean(&self, cols: std::ops::Range<usize>) -> DVector<f64> {
        let block = self.points.columns(cols.start, cols.len());
        block.transpose() * &self.weights
    }
}

/// Pairwise cost `|u_i - y_j|^2 / 2`, with `y` the columns of `nu` after the
/// first `d_x`.
pub fn cost_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure, d_x: usize) -> Result<DMatrix<f64>> {
    let d_y = mu.dim();
    if nu.dim() != d_x + d_y {
        return Err(Error::DimensionMismatch(format!(
            "nu has {} columns, expected d_x + d_y = {d_x} + {d_y}",
            nu.dim()
        )));
    }
    let u = mu.points();
    let y = nu.points().columns(d_x, d_y);
    Ok(DMatrix::from_fn(mu.len(), nu.len(), |i, j| {
        0.5 * (0..d_y).map(|k| (u[(i, k)] - y[(j, k)]).powi(2)).sum::<f64>()
    }))
}

/// Subtracts the weighted mean of the first `d_x` columns. Returns the
/// centered measure and the subtracted mean.
pub fn center_covariates(nu: &DiscreteMeasure, d_x: usize) -> Result<(DiscreteMeasure, DVector<f64>)> {
    if d_x > nu.dim() {
        return Err(Error::DimensionMismatch(format!(
            "d_x = {d_x} exceeds the {} columns of nu",
            nu.dim()
        )));
    }
    let shift = nu.block_mean(0..d_x);
    let mut points = nu.points.clone();
    for mut row in points.row_iter_mut() {
        for k in 0..d_x {
            row[k] -= shift[k];
        }
    }
    Ok((
        DiscreteMeasure {
            weights: nu.weights.clone(),
            points,
        },
        shift,
    ))
}

/// Entropic VQR instance. Covariates are centered on construction.
#[derive(Clone, Debug)]
pub struct Problem {
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    d_x: usize,
    epsilon: f64,
    centering_shift: DVector<f64>,
    cost: DMatrix<f64>,
}

impl Problem {
    pub fn new(mu: DiscreteMeasure, nu: DiscreteMeasure, d_x: usize, epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        if d_x == 0 {
            return Err(Error::InvalidParameter("at least one covariate column is required".into()));
        }
        if mu.dim() == 0 {
            return Err(Error::InvalidParameter("mu must have at least one coordinate".into()));
        }
        let cost = cost_matrix(&mu, &nu, d_x)?;
        let (nu, centering_shift) = center_covariates(&nu, d_x)?;
        Ok(Self {
            mu,
            nu,
            d_x,
            epsilon,
            centering_shift,
            cost,
        })
    }

    pub fn mu(&self) -> &DiscreteMeasure {
        &self.mu
    }

    /// The centered `(x, y)` marginal.
    pub fn nu(&self) -> &DiscreteMeasure {
        &self.nu
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn m(&self) -> usize {
        self.nu.len()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_y(&self) -> usize {
        self.mu.dim()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn centering_shift(&self) -> &DVector<f64> {
        &self.centering_shift
    }

    pub fn cost(&self) -> &DMatrix<f64> {
        &self.cost
    }

    pub fn a(&self) -> &DVector<f64> {
        self.mu.weights()
    }

    pub fn b(&self) -> &DVector<f64> {
        self.nu.weights()
    }

    /// Centered covariates, one row per `nu` atom.
    pub fn x(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.nu.points().columns(0, self.d_x)
    }

    pub fn u(&self) -> &DMatrix<f64> {
        self.mu.points()
    }

    pub fn y(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.nu.points().columns(self.d_x, self.d_y())
    }

    /// Same data with a different regularization.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            epsilon,
            ..self.clone()
        })
    }

    /// Warning text when `epsilon` is tiny relative to the median cost.
    pub fn epsilon_warning(&self) -> Option<String> {
        let mut c: Vec<f64> = self.cost.iter().copied().collect();
        c.sort_by(f64::total_cmp);
        let median = c[c.len() / 2];
        (self.epsilon < 1e-6 * median).then(|| {
            format!(
                "epsilon = {:e} is below 1e-6 x median cost ({median:e}); expect very slow convergence",
                self.epsilon
            )
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub x_mean_norm: f64,
    pub x_second_moment_min_eig: f64,
    pub rank_tol: f64,
    pub feasible: bool,
    pub messages: Vec<String>,
}

/// Checks that the covariate second moment `sum_j b_j x_j x_j^T` is invertible,
/// which together with the zero mean puts 0 in the interior of the convex hull
/// of the covariate atoms.
pub fn validate_problem(p: &Problem) -> ValidationReport {
    let x = p.x();
    let b = p.b();
    let mean = x.transpose() * b;
    let mut second = DMatrix::zeros(p.d_x(), p.d_x());
    for (j, row) in x.row_iter().enumerate() {
        second += row.transpose() * row * b[j];
    }
    let second = SymMatrix::symmetrize(second);
    let min_eig = second.min_eigenvalue();
    let rank_tol = RANK_TOL * second.trace() / p.d_x() as f64;
    let feasible = min_eig > rank_tol;

    let mut messages = Vec::new();
    if p.centering_shift().norm() > 0.0 {
        messages.push(format!(
            "covariates centered by subtracting weighted mean {:?}",
            p.centering_shift().as_slice()
        ));
    }
    if !feasible {
        messages.push(format!(
            "covariate second moment is singular (min eigenvalue {min_eig:e} <= {rank_tol:e}): \
             covariates lie in a hyperplane and 0 is not in the interior of their convex hull"
        ));
    }
    ValidationReport {
        x_mean_norm: mean.norm(),
        x_second_moment_min_eig: min_eig,
        rank_tol,
        feasible,
        messages,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn measure(w: &[f64], rows: &[&[f64]]) -> DiscreteMeasure {
        let d = rows[0].len();
        let pts = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        DiscreteMeasure::new(w.to_vec(), pts).unwrap()
    }

    #[test]
    fn cost_examples() {
        let mu = measure(&[0.5, 0.5], &[&[0.0], &[1.0]]);
        let nu = measure(&[0.5, 0.5], &[&[0.0], &[2.0]]);
        let c = cost_matrix(&mu, &nu, 0).unwrap();
        assert_eq!(c, dmatrix![0.0, 2.0; 0.5, 0.5]);

        let grid = measure(&[0.5, 0.5], &[&[0.0, 1.0], &[2.0, -1.0]]);
        let c = cost_matrix(&grid, &grid, 0).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
        assert_eq!(c[(1, 1)], 0.0);

        let u = measure(&[1.0], &[&[1.0, 0.0]]);
        let y = measure(&[1.0], &[&[0.0, 1.0]]);
        assert_eq!(cost_matrix(&u, &y, 0).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn cost_dimension_mismatch() {
        let mu = measure(&[1.0], &[&[0.0, 0.0]]);
        let nu = measure(&[1.0], &[&[0.0, 0.0]]);
        assert!(matches!(cost_matrix(&mu, &nu, 1), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn centering_examples() {
        let nu = measure(&[0.5, 0.5], &[&[1.0, 7.0], &[3.0, 8.0]]);
        let (c, s) = center_covariates(&nu, 1).unwrap();
        assert_eq!(s.as_slice(), &[2.0]);
        assert_eq!(c.points().column(0).as_slice(), &[-1.0, 1.0]);
        assert_eq!(c.points().column(1).as_slice(), &[7.0, 8.0]);

        let (c2, s2) = center_covariates(&c, 1).unwrap();
        assert_eq!(s2.as_slice(), &[0.0]);
        assert_eq!(c2, c);

        let nu = measure(&[0.25, 0.75], &[&[0.0, 0.0], &[4.0, 0.0]]);
        let (c, s) = center_covariates(&nu, 1).unwrap();
        assert_eq!(s.as_slice(), &[3.0]);
        assert_eq!(c.points().column(0).as_slice(), &[-3.0, 1.0]);
    }

    #[test]
    fn weights_checked_and_zero_atoms_dropped() {
        let pts = dmatrix![0.0; 1.0; 2.0];
        let m = DiscreteMeasure::new(vec![0.5, 0.0, 0.5], pts.clone()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.points().column(0).as_slice(), &[0.0, 2.0]);
        assert!(matches!(
            DiscreteMeasure::new(vec![0.5, 0.4, 0.0], pts.clone()),
            Err(Error::InvalidWeights(_))
        ));
        assert!(matches!(
            DiscreteMeasure::new(vec![1.5, -0.5, 0.0], pts.clone()),
            Err(Error::InvalidWeights(_))
        ));
        let bad = dmatrix![0.0; f64::NAN; 2.0];
        assert!(matches!(
            DiscreteMeasure::new(vec![0.5, 0.25, 0.25], bad),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn problem_centers_and_checks() {
        let mu = measure(&[0.5, 0.5], &[&[0.0], &[1.0]]);
        let nu = measure(&[0.5, 0.5], &[&[5.0, 0.0], &[7.0, 1.0]]);
        let p = Problem::new(mu.clone(), nu.clone(), 1, 0.5).unwrap();
        assert!((p.x().transpose() * p.b()).norm() <= 1e-12);
        assert_eq!(p.centering_shift().as_slice(), &[6.0]);
        assert!(Problem::new(mu.clone(), nu.clone(), 1, 0.0).is_err());
        assert!(Problem::new(mu, nu, 2, 1.0).is_err());
    }

    #[test]
    fn validation_examples() {
        let mu = measure(&[1.0], &[&[0.0]]);
        let nu = measure(&[0.5, 0.5], &[&[-1.0, 0.0], &[1.0, 0.0]]);
        let r = validate_problem(&Problem::new(mu.clone(), nu, 1, 1.0).unwrap());
        assert!(r.feasible);
        assert!((r.x_second_moment_min_eig - 1.0).abs() < 1e-15);

        let nu = measure(&[0.5, 0.5], &[&[0.0, 0.0], &[0.0, 1.0]]);
        let r = validate_problem(&Problem::new(mu.clone(), nu, 1, 1.0).unwrap());
        assert!(!r.feasible);

        let nu = measure(&[0.5, 0.5], &[&[1.0, 0.0, 0.0], &[-1.0, 0.0, 1.0]]);
        let r = validate_problem(&Problem::new(mu, nu, 2, 1.0).unwrap());
        assert!(!r.feasible);
        assert!(!r.messages.is_empty());
    }

    #[test]
    fn validation_scale_invariant() {
        let mu = measure(&[1.0], &[&[0.0]]);
        for scale in [1e-6, 1.0, 1e6] {
            let nu = measure(
                &[0.25, 0.25, 0.5],
                &[&[scale, 0.0, 0.0], &[-scale, scale, 1.0], &[0.0, -0.5 * scale, 2.0]],
            );
            let r = validate_problem(&Problem::new(mu.clone(), nu, 2, 1.0).unwrap());
            assert!(r.feasible, "scale {scale}");
        }
    }

    #[test]
    fn epsilon_warning_threshold() {
        let mu = measure(&[0.5, 0.5], &[&[0.0], &[1.0]]);
        let nu = measure(&[0.5, 0.5], &[&[-1.0, 3.0], &[1.0, 4.0]]);
        let p = Problem::new(mu, nu, 1, 1e-9).unwrap();
        assert!(p.epsilon_warning().is_some());
        assert!(p.with_epsilon(1.0).unwrap().epsilon_warning().is_none());
    }
}
