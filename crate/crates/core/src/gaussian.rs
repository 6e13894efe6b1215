//! Closed-form entropic VQR for Gaussian marginals.
//!
//! With `mu = N(0, I)` on `R^{d_y}` and `nu = N((0, m_y), Sigma)` on
//! `R^{d_x + d_y}`, the optimal coupling is `N(m, Gamma_eps)` with
//!
//! ```text
//! Gamma_eps = [[I, 0, L], [0, S_xx, S_xy], [L, S_yx, S_yy]],
//! L = (S_yy - S_yx S_xx^{-1} S_xy + eps^2/4 I)^{1/2} - eps/2 I.
//! ```
//!
//! Throughout, `omega_yy` is the inverse of the Schur complement
//! `S_yy - S_yx S_xx^{-1} S_xy`, `G = -S_xx^{-1} S_xy` and `Psi = L omega_yy`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, psd_sqrt, sym_solve, SymMatrix};

/// Gaussian law of `(X, Y)` with `E[X] = 0`.
#[derive(Clone, Debug)]
pub struct GaussianModel {
    m_y: DVector<f64>,
    sigma_xx: SymMatrix,
    sigma_xy: DMatrix<f64>,
    sigma_yy: SymMatrix,
    /// `-S_xx^{-1} S_xy`
    g: DMatrix<f64>,
    /// `S_yy - S_yx S_xx^{-1} S_xy`
    schur: SymMatrix,
    omega_yy: SymMatrix,
}

/// On-disk JSON layout; matrices are row-major nested arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianModelFile {
    pub m_y: Vec<f64>,
    pub sigma_xx: Vec<Vec<f64>>,
    pub sigma_xy: Vec<Vec<f64>>,
    pub sigma_yy: Vec<Vec<f64>>,
}

fn from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::DimensionMismatch(format!("{name}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl GaussianModel {
    pub fn new(m_y: DVector<f64>, sigma_xx: SymMatrix, sigma_xy: DMatrix<f64>, sigma_yy: SymMatrix) -> Result<Self> {
        let (d_x, d_y) = (sigma_xx.dim(), sigma_yy.dim());
        if d_x == 0 || d_y == 0 || m_y.len() != d_y || sigma_xy.shape() != (d_x, d_y) {
            return Err(Error::DimensionMismatch(format!(
                "m_y has {} entries, sigma_xx is {d_x}x{d_x}, sigma_xy is {:?}, sigma_yy is {d_y}x{d_y}",
                m_y.len(),
                sigma_xy.shape()
            )));
        }
        if m_y.iter().chain(sigma_xy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian model parameters".into()));
        }
        let mut full = DMatrix::zeros(d_x + d_y, d_x + d_y);
        full.view_mut((0, 0), (d_x, d_x)).copy_from(sigma_xx.as_matrix());
        full.view_mut((0, d_x), (d_x, d_y)).copy_from(&sigma_xy);
        full.view_mut((d_x, 0), (d_y, d_x)).copy_from(&sigma_xy.transpose());
        full.view_mut((d_x, d_x), (d_y, d_y)).copy_from(sigma_yy.as_matrix());
        SymMatrix::symmetrize(full).cholesky()?;

        let g = -sym_solve(&sigma_xx, &sigma_xy)?;
        let schur = SymMatrix::symmetrize(sigma_yy.as_matrix() + sigma_xy.transpose() * &g);
        let omega_yy = schur.spd_inverse()?;
        Ok(Self {
            m_y,
            sigma_xx,
            sigma_xy,
            sigma_yy,
            g,
            schur,
            omega_yy,
        })
    }

    pub fn from_file(file: &GaussianModelFile) -> Result<Self> {
        Self::new(
            DVector::from_vec(file.m_y.clone()),
            SymMatrix::new(from_rows(&file.sigma_xx, "sigma_xx")?)?,
            from_rows(&file.sigma_xy, "sigma_xy")?,
            SymMatrix::new(from_rows(&file.sigma_yy, "sigma_yy")?)?,
        )
    }

    pub fn to_file(&self) -> GaussianModelFile {
        GaussianModelFile {
            m_y: self.m_y.iter().copied().collect(),
            sigma_xx: to_rows(self.sigma_xx.as_matrix()),
            sigma_xy: to_rows(&self.sigma_xy),
            sigma_yy: to_rows(self.sigma_yy.as_matrix()),
        }
    }

    /// Scalar model with unit variances and the given correlation.
    pub fn scalar(rho: f64) -> Result<Self> {
        Self::new(
            DVector::zeros(1),
            SymMatrix::identity(1),
            DMatrix::from_element(1, 1, rho),
            SymMatrix::identity(1),
        )
    }

    pub fn d_x(&self) -> usize {
        self.sigma_xx.dim()
    }
    pub fn d_y(&self) -> usize {
        self.sigma_yy.dim()
    }
    pub fn m_y(&self) -> &DVector<f64> {
        &self.m_y
    }
    pub fn sigma_xx(&self) -> &SymMatrix {
        &self.sigma_xx
    }
    pub fn sigma_xy(&self) -> &DMatrix<f64> {
        &self.sigma_xy
    }
    pub fn sigma_yy(&self) -> &SymMatrix {
        &self.sigma_yy
    }
    /// `G = -S_xx^{-1} S_xy`.
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    /// Conditional covariance of `Y` given `X`.
    pub fn schur(&self) -> &SymMatrix {
        &self.schur
    }
    pub fn omega_yy(&self) -> &SymMatrix {
        &self.omega_yy
    }

    /// Full covariance of `(X, Y)`.
    pub fn sigma(&self) -> SymMatrix {
        let (d_x, d_y) = (self.d_x(), self.d_y());
        let mut full = DMatrix::zeros(d_x + d_y, d_x + d_y);
        full.view_mut((0, 0), (d_x, d_x)).copy_from(self.sigma_xx.as_matrix());
        full.view_mut((0, d_x), (d_x, d_y)).copy_from(&self.sigma_xy);
        full.view_mut((d_x, 0), (d_y, d_x)).copy_from(&self.sigma_xy.transpose());
        full.view_mut((d_x, d_x), (d_y, d_y)).copy_from(self.sigma_yy.as_matrix());
        SymMatrix::symmetrize(full)
    }
}

/// `(S_yy - S_yx S_xx^{-1} S_xy + eps^2/4 I)^{1/2} - eps/2 I`. `eps = 0` gives the limit.
pub fn lambda_eps(model: &GaussianModel, epsilon: f64) -> Result<SymMatrix> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidParameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let d = model.d_y();
    let shifted = SymMatrix::symmetrize(model.schur.as_matrix() + DMatrix::identity(d, d) * (0.25 * epsilon * epsilon));
    let root = psd_sqrt(&shifted)?;
    Ok(SymMatrix::symmetrize(root.into_inner() - DMatrix::identity(d, d) * (0.5 * epsilon)))
}

/// Joint Gaussian law of `(U, X, Y)`.
#[derive(Clone, Debug)]
pub struct GaussianCoupling {
    pub mean: DVector<f64>,
    pub gamma: SymMatrix,
    pub lambda: SymMatrix,
    pub d_x: usize,
    pub d_y: usize,
}

fn assemble(model: &GaussianModel, lambda: SymMatrix) -> GaussianCoupling {
    let (d_x, d_y) = (model.d_x(), model.d_y());
    let n = 2 * d_y + d_x;
    let mut gamma = DMatrix::zeros(n, n);
    gamma.view_mut((0, 0), (d_y, d_y)).fill_with_identity();
    gamma.view_mut((0, d_y + d_x), (d_y, d_y)).copy_from(lambda.as_matrix());
    gamma.view_mut((d_y + d_x, 0), (d_y, d_y)).copy_from(lambda.as_matrix());
    gamma
        .view_mut((d_y, d_y), (d_x + d_y, d_x + d_y))
        .copy_from(model.sigma().as_matrix());
    let mut mean = DVector::zeros(n);
    mean.rows_mut(d_y + d_x, d_y).copy_from(&model.m_y);
    GaussianCoupling {
        mean,
        gamma: SymMatrix::symmetrize(gamma),
        lambda,
        d_x,
        d_y,
    }
}

fn require_positive(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("epsilon must be > 0, got {epsilon}")))
    }
}

/// Optimal coupling `N(m, Gamma_eps)` for `eps > 0`.
pub fn optimal_gaussian_coupling(model: &GaussianModel, epsilon: f64) -> Result<GaussianCoupling> {
    require_positive(epsilon)?;
    let c = assemble(model, lambda_eps(model, epsilon)?);
    c.gamma.cholesky()?;
    Ok(c)
}

/// Unregularized limit `N(m, Gamma_o)`; `Gamma_o` has rank `d_x + d_y`.
pub fn limit_coupling(model: &GaussianModel) -> Result<GaussianCoupling> {
    Ok(assemble(model, lambda_eps(model, 0.0)?))
}

/// `|L omega_yy L^T + eps L omega_yy - I|_F`.
pub fn riccati_residual(model: &GaussianModel, lambda: &SymMatrix, epsilon: f64) -> f64 {
    let d = model.d_y();
    let l = lambda.as_matrix();
    let lo = l * model.omega_yy.as_matrix();
    (&lo * l.transpose() + &lo * epsilon - DMatrix::identity(d, d)).norm()
}

/// `|L omega_yy - omega_yy L|_F`.
pub fn commutator_norm(model: &GaussianModel, lambda: &SymMatrix) -> f64 {
    let o = model.omega_yy.as_matrix();
    let l = lambda.as_matrix();
    (l * o - o * l).norm()
}

#[derive(Clone, Debug, Serialize)]
pub struct PrecisionResiduals {
    pub theta_uy: f64,
    pub theta_uu: f64,
    pub theta_xu: f64,
}

impl PrecisionResiduals {
    pub fn max(&self) -> f64 {
        self.theta_uy.max(self.theta_uu).max(self.theta_xu)
    }
}

/// Inverts `Gamma_eps` and compares three precision blocks with their closed
/// forms `-I/eps`, `L/eps + I` and `S_xx^{-1} S_xy / eps`. Each deviation is
/// relative to the Frobenius norm of the closed form, or to `1/eps` when that
/// block vanishes.
pub fn precision_blocks(coupling: &GaussianCoupling, epsilon: f64) -> Result<PrecisionResiduals> {
    require_positive(epsilon)?;
    let (d_x, d_y) = (coupling.d_x, coupling.d_y);
    let theta = coupling.gamma.spd_inverse()?;
    let gamma = coupling.gamma.as_matrix();
    let sxx = SymMatrix::symmetrize(gamma.view((d_y, d_y), (d_x, d_x)).into_owned());
    let sxy = gamma.view((d_y, d_y + d_x), (d_x, d_y)).into_owned();

    let eye = DMatrix::<f64>::identity(d_y, d_y);
    let uy_target = &eye * (-1.0 / epsilon);
    let uu_target = coupling.lambda.as_matrix() / epsilon + &eye;
    let xu_target = sym_solve(&sxx, &sxy)? / epsilon;

    let rel = |block: DMatrix<f64>, target: &DMatrix<f64>| {
        let scale = target.norm();
        let scale = if scale > 0.0 { scale } else { 1.0 / epsilon };
        (block - target).norm() / scale
    };
    Ok(PrecisionResiduals {
        theta_uy: rel(theta.view((0, d_y + d_x), (d_y, d_y)).into_owned(), &uy_target),
        theta_uu: rel(theta.view((0, 0), (d_y, d_y)).into_owned(), &uu_target),
        theta_xu: rel(theta.view((d_y, 0), (d_x, d_y)).into_owned(), &xu_target),
    })
}

/// Quadratic dual potentials of the Gaussian problem:
///
/// ```text
/// f(u)    = -1/2 u^T (L - I) u - m_y^T u - f_const
/// g(u)    = G u
/// h(x, y) = -1/2 r^T Psi r + 1/2 |y|^2,   r = G^T x + y - m_y
/// ```
#[derive(Clone, Debug)]
pub struct GaussianPotentials {
    /// `L - I`
    pub f_quad: DMatrix<f64>,
    /// `m_y`
    pub f_lin: DVector<f64>,
    /// `(eps/2) log det(eps L omega_yy)`
    pub f_const: f64,
    pub g: DMatrix<f64>,
    /// `Psi = L omega_yy`
    pub psi: DMatrix<f64>,
    pub h_shift: DVector<f64>,
}

impl GaussianPotentials {
    pub fn f(&self, u: &DVector<f64>) -> f64 {
        -0.5 * u.dot(&(&self.f_quad * u)) - self.f_lin.dot(u) - self.f_const
    }

    pub fn g(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.g * u
    }

    pub fn h(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let r = self.g.transpose() * x + y - &self.h_shift;
        -0.5 * r.dot(&(&self.psi * &r)) + 0.5 * y.norm_squared()
    }
}

/// `log det(eps L omega_yy)`, via Cholesky of the symmetrized product.
pub fn log_det_scaled_psi(model: &GaussianModel, lambda: &SymMatrix, epsilon: f64) -> Result<f64> {
    let psi = SymMatrix::symmetrize(lambda.as_matrix() * model.omega_yy.as_matrix() * epsilon);
    psi.log_det()
}

pub fn gaussian_dual_potentials(model: &GaussianModel, epsilon: f64) -> Result<GaussianPotentials> {
    require_positive(epsilon)?;
    let lambda = lambda_eps(model, epsilon)?;
    let d = model.d_y();
    let psi = SymMatrix::symmetrize(lambda.as_matrix() * model.omega_yy.as_matrix());
    let log_det = log_det_scaled_psi(model, &lambda, epsilon)?;
    Ok(GaussianPotentials {
        f_quad: lambda.as_matrix() - DMatrix::identity(d, d),
        f_lin: model.m_y.clone(),
        f_const: 0.5 * epsilon * log_det,
        g: model.g.clone(),
        psi: psi.into_inner(),
        h_shift: model.m_y.clone(),
    })
}

/// Closed-form `Theta - Theta_0`, the difference between the precision of
/// `Gamma_eps` and that of the product reference `diag(I, Sigma^{-1})`.
pub fn delta_theta(model: &GaussianModel, epsilon: f64) -> Result<DMatrix<f64>> {
    require_positive(epsilon)?;
    let lambda = lambda_eps(model, epsilon)?;
    let (d_x, d_y) = (model.d_x(), model.d_y());
    let g = &model.g;
    let psi = lambda.as_matrix() * model.omega_yy.as_matrix();
    let n = 2 * d_y + d_x;
    let (u0, x0, y0) = (0, d_y, d_y + d_x);
    let mut dt = DMatrix::zeros(n, n);
    dt.view_mut((u0, u0), (d_y, d_y)).copy_from(lambda.as_matrix());
    dt.view_mut((u0, x0), (d_y, d_x)).copy_from(&(-g.transpose()));
    dt.view_mut((x0, u0), (d_x, d_y)).copy_from(&(-g));
    for k in 0..d_y {
        dt[(u0 + k, y0 + k)] = -1.0;
        dt[(y0 + k, u0 + k)] = -1.0;
    }
    dt.view_mut((x0, x0), (d_x, d_x)).copy_from(&(g * &psi * g.transpose()));
    dt.view_mut((x0, y0), (d_x, d_y)).copy_from(&(g * &psi));
    dt.view_mut((y0, x0), (d_y, d_x)).copy_from(&(&psi * g.transpose()));
    dt.view_mut((y0, y0), (d_y, d_y)).copy_from(&psi);
    Ok(dt / epsilon)
}

/// Relative Frobenius gap between [`delta_theta`] and `Gamma_eps^{-1} - diag(I, Sigma^{-1})`
/// computed by numerical inversion.
pub fn delta_theta_residual(model: &GaussianModel, epsilon: f64) -> Result<f64> {
    let closed = delta_theta(model, epsilon)?;
    let coupling = optimal_gaussian_coupling(model, epsilon)?;
    let theta = coupling.gamma.spd_inverse()?;
    let d_y = model.d_y();
    let mut theta0 = DMatrix::zeros(closed.nrows(), closed.ncols());
    theta0.view_mut((0, 0), (d_y, d_y)).fill_with_identity();
    let sigma_inv = model.sigma().spd_inverse()?;
    let k = sigma_inv.dim();
    theta0.view_mut((d_y, d_y), (k, k)).copy_from(sigma_inv.as_matrix());
    Ok((theta.as_matrix() - theta0 - &closed).norm() / closed.norm())
}

/// Max over `points` of the gap between
/// `(f(u) + <g(u), x> + h(x, y) - |u - y|^2 / 2) / eps` and
/// `-1/2 (w - m)^T dTheta (w - m) - 1/2 log det(eps L omega_yy)`, `w = (u, x, y)`.
pub fn log_density_identity_residual(model: &GaussianModel, epsilon: f64, points: &[DVector<f64>]) -> Result<f64> {
    let pots = gaussian_dual_potentials(model, epsilon)?;
    density_identity_residual_with(model, epsilon, &pots, points)
}

/// As [`log_density_identity_residual`] but for caller-supplied potentials.
pub fn density_identity_residual_with(
    model: &GaussianModel,
    epsilon: f64,
    pots: &GaussianPotentials,
    points: &[DVector<f64>],
) -> Result<f64> {
    let (d_x, d_y) = (model.d_x(), model.d_y());
    let dt = delta_theta(model, epsilon)?;
    let lambda = lambda_eps(model, epsilon)?;
    let log_det = log_det_scaled_psi(model, &lambda, epsilon)?;
    let mut mean = DVector::zeros(2 * d_y + d_x);
    mean.rows_mut(d_y + d_x, d_y).copy_from(&model.m_y);

    let mut worst = 0.0_f64;
    for w in points {
        if w.len() != 2 * d_y + d_x {
            return Err(Error::DimensionMismatch(format!(
                "sample point has {} entries, expected {}",
                w.len(),
                2 * d_y + d_x
            )));
        }
        let u = w.rows(0, d_y).into_owned();
        let x = w.rows(d_y, d_x).into_owned();
        let y = w.rows(d_y + d_x, d_y).into_owned();
        let lhs = (pots.f(&u) + pots.g(&u).dot(&x) + pots.h(&x, &y) - 0.5 * (&u - &y).norm_squared()) / epsilon;
        let r = w - &mean;
        let rhs = -0.5 * r.dot(&(&dt * &r)) - 0.5 * log_det;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Conditional covariance of `Y` given `(U, X)` under `Gamma_o`; zero in exact arithmetic.
pub fn limit_conditional_covariance(model: &GaussianModel) -> Result<DMatrix<f64>> {
    let lambda_o = lambda_eps(model, 0.0)?;
    let slope_x = sym_solve(&model.sigma_xx, &model.sigma_xy)?;
    Ok(model.sigma_yy.as_matrix() - lambda_o.as_matrix() * lambda_o.as_matrix() - model.sigma_xy.transpose() * slope_x)
}

/// `Y = m_y + L_o U + S_yx S_xx^{-1} X` under the limit coupling.
#[derive(Clone, Debug)]
pub struct LimitRegression {
    pub intercept: DVector<f64>,
    pub slope_u: DMatrix<f64>,
    pub slope_x: DMatrix<f64>,
}

pub fn limit_regression(model: &GaussianModel) -> Result<LimitRegression> {
    Ok(LimitRegression {
        intercept: model.m_y.clone(),
        slope_u: lambda_eps(model, 0.0)?.into_inner(),
        slope_x: -model.g.transpose(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MonteCarloReport {
    pub seed: u64,
    pub draws: usize,
    /// Largest `|S_ab - Gamma_ab| / sd_ab` over all covariance entries.
    pub max_abs_z: f64,
    pub within_3_sigma: bool,
}

/// Draws `U ~ N(0, I)`, `X ~ N(0, S_xx)` independently, pushes them through
/// [`limit_regression`] and compares the sample covariance of `(U, X, Y)`
/// with `Gamma_o` entrywise. The standard error of entry `(a, b)` is
/// `sqrt((G_aa G_bb + G_ab^2) / N)`.
pub fn limit_monte_carlo(model: &GaussianModel, draws: usize, seed: u64) -> Result<MonteCarloReport> {
    if draws == 0 {
        return Err(Error::InvalidParameter("draws must be positive".into()));
    }
    let reg = limit_regression(model)?;
    let gamma = limit_coupling(model)?.gamma;
    let (d_x, d_y) = (model.d_x(), model.d_y());
    let n = 2 * d_y + d_x;
    let chol_xx = model.sigma_xx.cholesky()?.l();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DMatrix::<f64>::zeros(n, n);
    let mut w = DVector::<f64>::zeros(n);
    let mut zu = DVector::<f64>::zeros(d_y);
    let mut zx = DVector::<f64>::zeros(d_x);
    for _ in 0..draws {
        zu.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        zx.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        let x = &chol_xx * &zx;
        // centered draw: the known mean m is subtracted
        let y = &reg.slope_u * &zu + &reg.slope_x * &x;
        w.rows_mut(0, d_y).copy_from(&zu);
        w.rows_mut(d_y, d_x).copy_from(&x);
        w.rows_mut(d_y + d_x, d_y).copy_from(&y);
        acc.ger(1.0, &w, &w, 1.0);
    }
    acc /= draws as f64;
    let mut max_z = 0.0_f64;
    for a in 0..n {
        for b in 0..n {
            let var = (gamma[(a, a)] * gamma[(b, b)] + gamma[(a, b)].powi(2)) / draws as f64;
            max_z = max_z.max((acc[(a, b)] - gamma[(a, b)]).abs() / var.sqrt());
        }
    }
    Ok(MonteCarloReport {
        seed,
        draws,
        max_abs_z: max_z,
        within_3_sigma: max_z <= 3.0,
    })
}

/// `L = I + L_o^2 + S_yx S_xx^{-2} S_xy`.
pub fn first_order_l(model: &GaussianModel) -> Result<SymMatrix> {
    let lambda_o = lambda_eps(model, 0.0)?;
    let d = model.d_y();
    // S_xx^{-1} S_xy = -G
    let l = DMatrix::identity(d, d) + lambda_o.as_matrix() * lambda_o.as_matrix() + model.g.transpose() * &model.g;
    Ok(SymMatrix::symmetrize(l))
}

/// Coefficient `tr(L^{-1} L_o)` of the leading term of `W_2^2(pi_eps, pi_o)`.
pub fn w2_first_order(model: &GaussianModel) -> Result<f64> {
    let lambda_o = lambda_eps(model, 0.0)?;
    Ok(sym_solve(&first_order_l(model)?, lambda_o.as_matrix())?.trace())
}

/// Distance from `(0, 0, r)` to the support `{y = L_o u - G^T x}` of the limit, as `sqrt(r^T L^{-1} r)`.
pub fn subspace_distance(model: &GaussianModel, r: &DVector<f64>) -> Result<f64> {
    let l = first_order_l(model)?;
    let sol = sym_solve(&l, &DMatrix::from_column_slice(r.len(), 1, r.as_slice()))?;
    Ok(r.dot(&sol.column(0)).max(0.0).sqrt())
}

/// `W_2^2(N(m, Gamma_eps), N(m, Gamma_o))` by the Bures formula. `eps = 0` gives 0.
pub fn w2_exact(model: &GaussianModel, epsilon: f64) -> Result<f64> {
    if epsilon == 0.0 {
        return Ok(0.0);
    }
    let eps_coupling = optimal_gaussian_coupling(model, epsilon)?;
    let limit = limit_coupling(model)?;
    linalg::bures_w2_squared(&eps_coupling.gamma, &limit.gamma)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub w2_exact: f64,
    pub first_order: f64,
    pub ratio: f64,
    pub residual_over_eps2: f64,
}

/// One row per `eps`, in input order.
pub fn sweep_epsilon(model: &GaussianModel, eps_grid: &[f64]) -> Result<Vec<SweepRow>> {
    let coef = w2_first_order(model)?;
    eps_grid
        .iter()
        .map(|&eps| {
            require_positive(eps)?;
            let w2 = w2_exact(model, eps)?;
            let first = eps * coef;
            Ok(SweepRow {
                epsilon: eps,
                w2_exact: w2,
                first_order: first,
                ratio: w2 / first,
                residual_over_eps2: (w2 - first) / (eps * eps),
            })
        })
        .collect()
}
