//! Block-coordinate dual ascent for discrete entropic VQR.
//!
//! The dual objective over potentials `(f, g, h)` is
//!
//! ```text
//! D(f, g, h) = sum_i a_i f_i + sum_j b_j h_j
//!            - eps * (sum_ij a_i b_j exp((f_i + <g_i, x_j> + h_j - c_ij) / eps) - 1)
//! ```
//!
//! and the optimal coupling is `pi_ij = a_i b_j exp((f_i + <g_i, x_j> + h_j - c_ij) / eps)`.
//! One sweep maximizes `D` exactly over `(g_i, f_i)` for every row `i`
//! (a strictly convex log-partition minimization in `g_i`, then a closed-form
//! normalizer for `f_i`) and then over `h` in closed form. Rows only read `h`,
//! so the row block is embarrassingly parallel and thread count does not
//! change the result.
//!
//! Plain block ascent can contract very slowly when the row problems are
//! badly conditioned, so [`solve_from`] also proposes a second point per
//! iteration and keeps it only if the dual is higher.
//!
//! Everything is computed in the log domain with max-shifted sums.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::measures::{validate_problem, Problem};

/// Log-entries of the coupling above this value are reported as overflow.
pub const LOG_OVERFLOW: f64 = 700.0;
const ARMIJO: f64 = 1e-4;
// Enough to shrink a ridge-dominated step from ~1e20 down to roundoff.
const MAX_HALVINGS: usize = 200;

/// Dual potentials. `g` has one row per `mu` atom.
#[derive(Clone, Debug, PartialEq)]
pub struct Potentials {
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl Potentials {
    pub fn zeros(p: &Problem) -> Self {
        Self {
            f: DVector::zeros(p.n()),
            g: DMatrix::zeros(p.n(), p.d_x()),
            h: DVector::zeros(p.m()),
        }
    }

    fn check_shape(&self, p: &Problem) -> Result<()> {
        if self.f.len() != p.n() || self.g.shape() != (p.n(), p.d_x()) || self.h.len() != p.m() {
            return Err(Error::DimensionMismatch(format!(
                "potentials have shapes f:{} g:{:?} h:{}, problem is n={} d_x={} m={}",
                self.f.len(),
                self.g.shape(),
                self.h.len(),
                p.n(),
                p.d_x(),
                p.m()
            )));
        }
        if self.f.iter().chain(self.g.iter()).chain(self.h.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("potentials".into()));
        }
        Ok(())
    }

    /// Largest absolute entrywise difference across `f`, `g` and `h`.
    pub fn sup_distance(&self, other: &Potentials) -> f64 {
        let df = (&self.f - &other.f).amax();
        let dg = if self.g.is_empty() { 0.0 } else { (&self.g - &other.g).amax() };
        let dh = (&self.h - &other.h).amax();
        df.max(dg).max(dh)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub pi: DMatrix<f64>,
}

impl Coupling {
    pub fn l1_distance(&self, other: &Coupling) -> f64 {
        (&self.pi - &other.pi).abs().sum()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolverOptions {
    /// Outer stopping tolerance.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Newton stopping tolerance on the tilted covariate mean, relative to `max_j |x_j|`.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// `|g_i|` beyond this means the row constraint cannot be met.
    pub theta_max: f64,
    /// Hessian regularization floor, relative to `trace(H) / d_x`.
    pub ridge: f64,
    /// Worker threads for the row block.
    pub threads: usize,
    /// Largest `m` for which each iteration also tries a Newton step on `h`.
    pub newton_max_atoms: usize,
    /// History length for safeguarded Anderson extrapolation of `h` when
    /// `m > newton_max_atoms`; 0 turns it off.
    pub anderson_memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_sweeps: 10_000,
            inner_tol: 1e-12,
            inner_max_iter: 50,
            theta_max: 1e8,
            ridge: 1e-12,
            threads: 1,
            newton_max_atoms: 1000,
            anderson_memory: 5,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.tol, self.inner_tol, self.theta_max, self.ridge]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.max_sweeps == 0 || self.inner_max_iter == 0 || self.threads == 0 {
            return Err(Error::InvalidParameter(format!(
                "solver options must all be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveReport {
    pub sweeps: usize,
    pub primal_value: f64,
    pub dual_value: f64,
    pub duality_gap: f64,
    pub marginal_residual: f64,
    pub mean_indep_residual: f64,
    pub schrodinger_residual: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub coupling: Coupling,
    pub potentials: Potentials,
    pub report: SolveReport,
}

/// `log sum_k exp(v_k)` with max shift. Empty input gives `-inf`.
pub(crate) fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn dot_row(g: &DMatrix<f64>, i: usize, x: &nalgebra::DMatrixView<'_, f64>, j: usize) -> f64 {
    (0..g.ncols()).map(|k| g[(i, k)] * x[(j, k)]).sum()
}

/// Closed-form maximizer of the dual over `h` given `(f, g)`.
pub fn update_h(p: &Problem, f: &DVector<f64>, g: &DMatrix<f64>) -> DVector<f64> {
    let eps = p.epsilon();
    let (a, c, x) = (p.a(), p.cost(), p.x());
    let h: Vec<f64> = (0..p.m())
        .into_par_iter()
        .map(|j| {
            let terms = (0..p.n()).map(|i| a[i].ln() + (f[i] + dot_row(g, i, &x, j) - c[(i, j)]) / eps);
            -eps * logsumexp(terms)
        })
        .collect();
    DVector::from_vec(h)
}

/// Normalizer of row `i` given `g_i` and `h`.
fn row_f(p: &Problem, i: usize, theta: &DVector<f64>, h: &DVector<f64>) -> f64 {
    let eps = p.epsilon();
    let (b, c, x) = (p.b(), p.cost(), p.x());
    let terms = (0..p.m()).map(|j| {
        let tx: f64 = (0..p.d_x()).map(|k| theta[k] * x[(j, k)]).sum();
        b[j].ln() + (tx + h[j] - c[(i, j)]) / eps
    });
    -eps * logsumexp(terms)
}

/// Closed-form maximizer of the dual over `f` given `(g, h)`.
pub fn update_f(p: &Problem, g: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        p.n(),
        (0..p.n()).map(|i| row_f(p, i, &g.row(i).transpose(), h)),
    )
}

/// Exponential tilt of `nu` at one `u`: `A(theta) = eps * log sum_j b_j exp((<theta, x_j> + h_j - cost_j) / eps)`.
struct Tilt<'a> {
    x: nalgebra::DMatrixView<'a, f64>,
    log_b: Vec<f64>,
    offset: Vec<f64>,
    eps: f64,
}

struct TiltEval {
    value: f64,
    /// Largest exponent magnitude, which sets the roundoff in `value`.
    z_max: f64,
    /// `max_j z_j - min_j z_j`.
    z_spread: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl<'a> Tilt<'a> {
    fn new(p: &'a Problem, h: &DVector<f64>, cost_row: impl Iterator<Item = f64>) -> Self {
        let offset = cost_row.zip(h.iter()).map(|(c, hj)| hj - c).collect();
        Tilt {
            x: p.x(),
            log_b: p.b().iter().map(|v| v.ln()).collect(),
            offset,
            eps: p.epsilon(),
        }
    }

    fn exponents(&self, theta: &DVector<f64>) -> Vec<f64> {
        (0..self.log_b.len())
            .map(|j| {
                let tx: f64 = (0..theta.len()).map(|k| theta[k] * self.x[(j, k)]).sum();
                self.log_b[j] + (tx + self.offset[j]) / self.eps
            })
            .collect()
    }

    fn value(&self, theta: &DVector<f64>) -> f64 {
        self.eps * logsumexp(self.exponents(theta).into_iter())
    }

    /// Value, gradient `sum_j p_j x_j`, Hessian `cov_p(x) / eps`.
    fn eval(&self, theta: &DVector<f64>) -> TiltEval {
        let z = self.exponents(theta);
        let lse = logsumexp(z.iter().copied());
        let d = theta.len();
        let weights: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let mut grad = DVector::zeros(d);
        for (j, w) in weights.iter().enumerate() {
            for k in 0..d {
                grad[k] += w * self.x[(j, k)];
            }
        }
        let mut hess = DMatrix::zeros(d, d);
        for (j, w) in weights.iter().enumerate() {
            for r in 0..d {
                let dr = self.x[(j, r)] - grad[r];
                for s in 0..=r {
                    hess[(r, s)] += w * dr * (self.x[(j, s)] - grad[s]);
                }
            }
        }
        for r in 0..d {
            for s in 0..r {
                hess[(s, r)] = hess[(r, s)];
            }
        }
        hess /= self.eps;
        TiltEval {
            value: self.eps * lse,
            z_max: z.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
            z_spread: z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) - z.iter().fold(f64::INFINITY, |m, v| m.min(*v)),
            grad,
            hess,
        }
    }

    fn scale(&self) -> f64 {
        self.x
            .row_iter()
            .map(|r| r.norm())
            .fold(0.0, f64::max)
    }

    /// `max_j |<step, x_j>| / eps`: the largest change of any exponent.
    fn reach(&self, step: &DVector<f64>) -> f64 {
        self.x
            .row_iter()
            .map(|r| (r * step)[0].abs())
            .fold(0.0, f64::max)
            / self.eps
    }

    /// Damped Newton on the convex log-partition.
    ///
    /// A step may move any exponent by at most twice the current spread of the
    /// exponents: anything longer only reorders a near point mass, where the
    /// Hessian is too flat for the Newton model to mean anything.
    fn minimize(&self, theta0: DVector<f64>, opts: &SolverOptions) -> Result<DVector<f64>> {
        let scale = self.scale();
        // gradient entries carry relative error ~ eps_mach * max|z|
        let target = |e: &TiltEval| scale * opts.inner_tol.max(16.0 * f64::EPSILON * (1.0 + e.z_max));
        let mut theta = theta0;
        let mut cur = self.eval(&theta);
        for _ in 0..opts.inner_max_iter {
            if cur.grad.norm() <= target(&cur) {
                return Ok(theta);
            }
            let floor = f64::EPSILON * scale * scale / self.eps;
            let mut step = newton_step(&cur.hess, &cur.grad, opts.ridge, floor)?;
            let cap = 2.0 * (1.0 + cur.z_spread);
            let reach = self.reach(&step);
            if reach > cap {
                step *= cap / reach;
            }
            let slope = cur.grad.dot(&step);
            // Near the optimum the decrease falls below the roundoff of the
            // value, so allow a few ulps of the largest exponent as slack.
            let slack = 8.0 * f64::EPSILON * (cur.value.abs() + self.eps * (1.0 + cur.z_max));
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                if t * step.amax() <= f64::EPSILON * theta.amax() {
                    break;
                }
                let trial = &theta + &step * t;
                let v = self.value(&trial);
                if v.is_finite() && v <= cur.value + ARMIJO * t * slope + slack {
                    theta = trial;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if theta.norm() > opts.theta_max {
                return Err(infeasible(theta.norm(), opts.theta_max));
            }
            if !accepted {
                break;
            }
            cur = self.eval(&theta);
        }
        let grad = cur.grad.norm();
        if grad <= target(&cur) {
            Ok(theta)
        } else if theta.norm() > opts.theta_max {
            Err(infeasible(theta.norm(), opts.theta_max))
        } else {
            Err(Error::NoConvergence(format!(
                "tilt Newton solve stopped with gradient norm {grad:e} (target {:e})",
                target(&cur)
            )))
        }
    }
}

fn infeasible(norm: f64, limit: f64) -> Error {
    Error::ConstraintInfeasible(format!(
        "|g| = {norm:e} exceeds {limit:e}: 0 is on or outside the boundary of the convex hull \
         of the covariate atoms, so the row mean-zero constraint has no finite solution"
    ))
}

/// Solves `H s = -grad`, adding a relative ridge when `H` is not numerically PD.
/// `floor` keeps the ridge meaningful when the Hessian underflows.
fn newton_step(hess: &DMatrix<f64>, grad: &DVector<f64>, ridge: f64, floor: f64) -> Result<DVector<f64>> {
    let d = grad.len();
    let base = (hess.trace() / d as f64).max(floor).max(f64::MIN_POSITIVE);
    let mut shift = 0.0;
    for _ in 0..8 {
        let m = SymMatrix::symmetrize(hess + DMatrix::identity(d, d) * shift);
        if let Ok(chol) = m.cholesky() {
            let step = -chol.solve(grad);
            if step.iter().all(|v| v.is_finite()) {
                return Ok(step);
            }
        }
        shift = if shift == 0.0 { ridge * base } else { shift * 1e3 };
    }
    Err(Error::ConstraintInfeasible(
        "tilted covariate covariance is singular: covariates are degenerate".into(),
    ))
}

/// Solves the row mean-zero condition `sum_j p_j(theta) x_j = 0` for `g_i`.
pub fn solve_g_row(
    p: &Problem,
    row: usize,
    h: &DVector<f64>,
    theta0: DVector<f64>,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    let c = p.cost();
    let tilt = Tilt::new(p, h, (0..p.m()).map(|j| c[(row, j)]));
    tilt.minimize(theta0, opts)
}

/// Exact maximization over `(g_i, f_i)` for one row, given `h`.
pub fn update_row(
    p: &Problem,
    row: usize,
    h: &DVector<f64>,
    g_warm: DVector<f64>,
    opts: &SolverOptions,
) -> Result<(f64, DVector<f64>)> {
    let theta = solve_g_row(p, row, h, g_warm, opts)?;
    let f = row_f(p, row, &theta, h);
    Ok((f, theta))
}

/// Every row `(g_i, f_i)` maximized for the given `h`, warm-started at `warm`.
fn update_rows(p: &Problem, h: DVector<f64>, warm: &DMatrix<f64>, opts: &SolverOptions) -> Result<Potentials> {
    let rows: Vec<(f64, DVector<f64>)> = (0..p.n())
        .into_par_iter()
        .map(|i| update_row(p, i, &h, warm.row(i).transpose(), opts))
        .collect::<Result<_>>()?;
    let f = DVector::from_iterator(p.n(), rows.iter().map(|r| r.0));
    let mut g = DMatrix::zeros(p.n(), p.d_x());
    for (i, (_, theta)) in rows.iter().enumerate() {
        g.set_row(i, &theta.transpose());
    }
    Ok(Potentials { f, g, h })
}

/// One full pass: every row `(g_i, f_i)` from the same `h`, then `h`.
pub fn sweep(p: &Problem, pots: &Potentials, opts: &SolverOptions) -> Result<Potentials> {
    let mut next = update_rows(p, pots.h.clone(), &pots.g, opts)?;
    next.h = update_h(p, &next.f, &next.g);
    Ok(next)
}

/// Log-entries `log(a_i b_j) + (f_i + <g_i, x_j> + h_j - c_ij) / eps`.
fn log_coupling(p: &Problem, pots: &Potentials) -> DMatrix<f64> {
    let eps = p.epsilon();
    let (a, b, c, x) = (p.a(), p.b(), p.cost(), p.x());
    DMatrix::from_fn(p.n(), p.m(), |i, j| {
        a[i].ln() + b[j].ln() + (pots.f[i] + dot_row(&pots.g, i, &x, j) + pots.h[j] - c[(i, j)]) / eps
    })
}

pub fn coupling_from_potentials(p: &Problem, pots: &Potentials) -> Result<Coupling> {
    pots.check_shape(p)?;
    let log_pi = log_coupling(p, pots);
    let max = log_pi.max();
    if max > LOG_OVERFLOW {
        return Err(Error::Overflow(format!(
            "coupling log-entry {max:e} exceeds {LOG_OVERFLOW}: potentials are not normalized"
        )));
    }
    Ok(Coupling { pi: log_pi.map(f64::exp) })
}

/// `sum_ij pi_ij c_ij`.
pub fn transport_cost(p: &Problem, pi: &Coupling) -> f64 {
    pi.pi.component_mul(p.cost()).sum()
}

/// `KL(pi || a (x) b)` with `0 log 0 = 0`.
pub fn kl_to_product(p: &Problem, pi: &Coupling) -> Result<f64> {
    let (a, b) = (p.a(), p.b());
    if pi.pi.shape() != (p.n(), p.m()) {
        return Err(Error::DimensionMismatch(format!(
            "coupling is {:?}, problem is {}x{}",
            pi.pi.shape(),
            p.n(),
            p.m()
        )));
    }
    let mut kl = 0.0;
    for i in 0..p.n() {
        for j in 0..p.m() {
            let v = pi.pi[(i, j)];
            let r = a[i] * b[j];
            if v < 0.0 || !v.is_finite() {
                return Err(Error::DomainError(format!("coupling entry ({i},{j}) = {v}")));
            }
            if v > 0.0 {
                if r <= 0.0 {
                    return Err(Error::DomainError(format!(
                        "coupling puts mass on ({i},{j}) where the product measure has none"
                    )));
                }
                kl += v * (v / r).ln();
            }
        }
    }
    Ok(kl)
}

/// `sum pi c + eps KL(pi || a (x) b)`.
pub fn primal_value(p: &Problem, pi: &Coupling) -> Result<f64> {
    Ok(transport_cost(p, pi) + p.epsilon() * kl_to_product(p, pi)?)
}

/// The mass term `eps * (sum_ij pi_ij - 1)` of the dual objective.
pub fn dual_mass_term(p: &Problem, pots: &Potentials) -> Result<f64> {
    let pi = coupling_from_potentials(p, pots)?;
    Ok(p.epsilon() * (pi.pi.sum() - 1.0))
}

pub fn dual_value(p: &Problem, pots: &Potentials) -> Result<f64> {
    let iota = dual_mass_term(p, pots)?;
    Ok(p.a().dot(&pots.f) + p.b().dot(&pots.h) - iota)
}

pub fn duality_gap(p: &Problem, pi: &Coupling, pots: &Potentials) -> Result<f64> {
    Ok(primal_value(p, pi)? - dual_value(p, pots)?)
}

/// Removes the affine gauge: shifts so that `sum_i a_i f_i = 0` and
/// `sum_i a_i g_i = 0`, compensating in `h`. The coupling is unchanged.
pub fn gauge_fix(p: &Problem, pots: &Potentials) -> Potentials {
    let a = p.a();
    let shift = a.dot(&pots.f);
    let v = pots.g.transpose() * a;
    gauge_shift(p, pots, -shift, &(-v))
}

/// Applies `f + s`, `g + v`, `h - s - <v, x>`.
pub fn gauge_shift(p: &Problem, pots: &Potentials, s: f64, v: &DVector<f64>) -> Potentials {
    let x = p.x();
    let mut out = pots.clone();
    out.f.add_scalar_mut(s);
    for mut row in out.g.row_iter_mut() {
        row += v.transpose();
    }
    for j in 0..p.m() {
        let vx: f64 = (0..p.d_x()).map(|k| v[k] * x[(j, k)]).sum();
        out.h[j] -= s + vx;
    }
    out
}

/// `(marginal residual, mean-independence residual)` of a coupling.
pub fn feasibility_residuals(p: &Problem, pi: &Coupling) -> (f64, f64) {
    let rows = pi.pi.column_sum();
    let cols = pi.pi.row_sum().transpose();
    let marginal = (rows - p.a()).amax().max((cols - p.b()).amax());
    let means = &pi.pi * p.x();
    let mean_indep = means.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    (marginal, mean_indep)
}

/// Sup-norm residual of the fixed-point system: `f` and `h` against their
/// closed-form updates, and the row mean-zero conditions for `g`.
pub fn schrodinger_residual(p: &Problem, pots: &Potentials) -> f64 {
    let f_res = (update_f(p, &pots.g, &pots.h) - &pots.f).amax();
    let h_res = (update_h(p, &pots.f, &pots.g) - &pots.h).amax();
    let c = p.cost();
    let g_res = (0..p.n())
        .map(|i| {
            let tilt = Tilt::new(p, &pots.h, (0..p.m()).map(|j| c[(i, j)]));
            tilt.eval(&pots.g.row(i).transpose()).grad.norm()
        })
        .fold(0.0, f64::max);
    f_res.max(h_res).max(g_res)
}

fn build_report(p: &Problem, pots: &Potentials, coupling: &Coupling, sweeps: usize, converged: bool) -> Result<SolveReport> {
    let primal = primal_value(p, coupling)?;
    let dual = dual_value(p, pots)?;
    let (marginal, mean_indep) = feasibility_residuals(p, coupling);
    Ok(SolveReport {
        sweeps,
        primal_value: primal,
        dual_value: dual,
        duality_gap: primal - dual,
        marginal_residual: marginal,
        mean_indep_residual: mean_indep,
        schrodinger_residual: schrodinger_residual(p, pots),
        converged,
    })
}

/// Solves from zero potentials.
pub fn solve(p: &Problem, opts: &SolverOptions) -> Result<Solution> {
    solve_from(p, opts, Potentials::zeros(p))
}

/// Past inputs and outputs of the sweep map `h -> T(h)`.
struct Anderson {
    memory: usize,
    inputs: VecDeque<DVector<f64>>,
    outputs: VecDeque<DVector<f64>>,
}

impl Anderson {
    fn new(memory: usize) -> Self {
        Anderson {
            memory,
            inputs: VecDeque::new(),
            outputs: VecDeque::new(),
        }
    }

    fn push(&mut self, h: &DVector<f64>, t_h: &DVector<f64>) {
        if self.memory == 0 {
            return;
        }
        self.inputs.push_back(h.clone());
        self.outputs.push_back(t_h.clone());
        if self.inputs.len() > self.memory + 1 {
            self.inputs.pop_front();
            self.outputs.pop_front();
        }
    }

    fn reset(&mut self) {
        self.inputs.clear();
        self.outputs.clear();
    }

    /// `T(h_k) - dT gamma` with `gamma` the least-squares fit of the last
    /// residual by residual differences.
    fn extrapolate(&self) -> Option<DVector<f64>> {
        let l = self.inputs.len();
        if l < 2 {
            return None;
        }
        let r: Vec<DVector<f64>> = self.outputs.iter().zip(&self.inputs).map(|(t, h)| t - h).collect();
        let m = r[0].len();
        let dr = DMatrix::from_fn(m, l - 1, |j, c| r[c + 1][j] - r[c][j]);
        let dt = DMatrix::from_fn(m, l - 1, |j, c| self.outputs[c + 1][j] - self.outputs[c][j]);
        let svd = dr.svd(true, true);
        let cutoff = (1e-12 * svd.singular_values.max()).max(1e-6 * r[l - 1].norm());
        if cutoff == 0.0 {
            return None;
        }
        let gamma = svd.solve(&r[l - 1], cutoff).ok()?;
        let h = &self.outputs[l - 1] - dt * gamma;
        h.iter().all(|v| v.is_finite()).then_some(h)
    }
}

/// Rows per partial sum of the curvature, fixed so that the summation order
/// does not depend on the thread count.
const CURVATURE_CHUNK: usize = 16;
/// Largest exponent change, in units of `eps`, of a Newton step on `h`.
const NEWTON_REACH: f64 = 50.0;
const NEWTON_HALVINGS: usize = 20;

/// Negated Hessian of `h -> max_{f, g} D(f, g, h)` at row-optimal potentials.
///
/// Row `i` contributes `(diag(w) - w w^T / a_i - W X (X^T W X)^+ X^T W) / eps`
/// with `w` the coupling row and `W = diag(w)`. The null space contains the
/// constant vector and the covariate columns.
fn semi_dual_curvature(p: &Problem, pi: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, d) = (p.m(), p.d_x());
    let x = p.x();
    let rows: Vec<usize> = (0..p.n()).collect();
    let parts: Vec<DMatrix<f64>> = rows
        .par_chunks(CURVATURE_CHUNK)
        .map(|chunk| {
            let mut acc = DMatrix::zeros(m, m);
            for &i in chunk {
                let w = pi.row(i).transpose();
                let wx = DMatrix::from_fn(m, d, |j, k| w[j] * x[(j, k)]);
                let eig = SymmetricEigen::new(x.transpose() * &wx);
                let top = eig.eigenvalues.amax();
                let inv = eig.eigenvalues.map(|l| if l > 1e-14 * top { 1.0 / l } else { 0.0 });
                let v = &eig.eigenvectors;
                let proj = &wx * v * DMatrix::from_diagonal(&inv) * v.transpose() * wx.transpose();
                acc += DMatrix::from_diagonal(&w) - &w * w.transpose() / p.a()[i] - proj;
            }
            acc
        })
        .collect();
    parts.into_iter().fold(DMatrix::zeros(m, m), |s, c| s + c) / p.epsilon()
}

/// Newton direction for `h` at row-optimal potentials, or `None` when the
/// curvature is numerically zero. The gauge directions are filled in with
/// the mean curvature so the system is definite.
fn newton_direction(p: &Problem, pi: &DMatrix<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = p.m();
    let grad = p.b() - pi.row_sum().transpose();
    let mut hess = semi_dual_curvature(p, pi);
    let scale = hess.trace() / m as f64;
    if !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    let mut z = DMatrix::zeros(m, 1 + p.d_x());
    z.column_mut(0).fill(1.0);
    z.view_mut((0, 1), (m, p.d_x())).copy_from(&p.x());
    hess += &z * z.transpose() * scale;
    let mut shift = 1e-12 * scale;
    for _ in 0..6 {
        if let Some(chol) = hess.clone().cholesky() {
            let mut step = chol.solve(&grad);
            if step.iter().all(|v| v.is_finite()) {
                let reach = step.amax() / p.epsilon();
                if reach > NEWTON_REACH {
                    step *= NEWTON_REACH / reach;
                }
                return Some((step, grad));
            }
        }
        for j in 0..m {
            hess[(j, j)] += shift;
        }
        shift *= 1e3;
    }
    None
}

/// Backtracking line search along a Newton direction, with at most `budget`
/// row passes. Returns the first row-optimal point with sufficient increase,
/// and the number of row passes.
fn newton_candidate(
    p: &Problem,
    pots: &Potentials,
    value: f64,
    opts: &SolverOptions,
    budget: usize,
) -> Result<(Option<Potentials>, usize)> {
    if budget == 0 {
        return Ok((None, 0));
    }
    let pi = coupling_from_potentials(p, pots)?.pi;
    let Some((step, grad)) = newton_direction(p, &pi) else {
        return Ok((None, 0));
    };
    let slope = grad.dot(&step);
    let mut t = 1.0;
    let tries = NEWTON_HALVINGS.min(budget);
    for k in 0..tries {
        let trial = update_rows(p, &pots.h + &step * t, &pots.g, opts).ok();
        if let Some(trial) = trial {
            if dual_value(p, &trial).is_ok_and(|v| v > value && v >= value + ARMIJO * t * slope) {
                return Ok((Some(trial), k + 1));
            }
        }
        t *= 0.5;
    }
    Ok((None, tries))
}

/// Solves from the given initial potentials.
///
/// Iterates are kept row-optimal: each iteration updates `h` in closed form
/// and then every row, which is one block-ascent sweep. The iteration then
/// proposes a second point, a damped Newton step on `h` for the row-maximized
/// dual when `m <= newton_max_atoms` and an Anderson extrapolation of the
/// sweep map otherwise, and keeps it only when its dual value is higher. The
/// dual therefore increases at every iteration. Stops when the sup-norm
/// change of the potentials over an iteration is below `tol * (1 + eps)` and
/// both feasibility residuals are below `tol`. `sweeps` in the report counts
/// every pass over the rows. Returns gauge-fixed potentials. Running out of
/// sweeps yields [`Error::NotConverged`] carrying the last iterate.
pub fn solve_from(p: &Problem, opts: &SolverOptions, init: Potentials) -> Result<Solution> {
    opts.validate()?;
    init.check_shape(p)?;
    let validation = validate_problem(p);
    if !validation.feasible {
        return Err(Error::ConstraintInfeasible(validation.messages.join("; ")));
    }
    if let Some(w) = p.epsilon_warning() {
        log::warn!("{w}");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;

    pool.install(|| {
        let newton = p.m() <= opts.newton_max_atoms;
        let mut history = Anderson::new(if newton { 0 } else { opts.anderson_memory });
        let change_tol = opts.tol * (1.0 + p.epsilon());
        let done = |next: &Potentials, prev: &Potentials| -> Result<bool> {
            if next.sup_distance(prev) >= change_tol {
                return Ok(false);
            }
            let (marginal, mean_indep) = feasibility_residuals(p, &coupling_from_potentials(p, next)?);
            Ok(marginal < opts.tol && mean_indep < opts.tol)
        };

        let mut pots = update_rows(p, init.h, &init.g, opts)?;
        let mut sweeps = 1;
        let mut converged = false;
        while sweeps < opts.max_sweeps {
            let h = update_h(p, &pots.f, &pots.g);
            let mut next = update_rows(p, h, &pots.g, opts)?;
            sweeps += 1;
            if done(&next, &pots)? {
                pots = next;
                converged = true;
                break;
            }
            let value = dual_value(p, &next)?;
            let candidate = if newton {
                let (cand, passes) = newton_candidate(p, &next, value, opts, opts.max_sweeps - sweeps)?;
                sweeps += passes;
                cand
            } else {
                history.push(&pots.h, &next.h);
                match history.extrapolate().filter(|_| sweeps < opts.max_sweeps) {
                    Some(h) => {
                        sweeps += 1;
                        let cand = update_rows(p, h, &next.g, opts)
                            .ok()
                            .filter(|c| dual_value(p, c).is_ok_and(|v| v > value));
                        if cand.is_none() {
                            history.reset();
                        }
                        cand
                    }
                    None => None,
                }
            };
            if let Some(cand) = candidate {
                next = cand;
                if done(&next, &pots)? {
                    pots = next;
                    converged = true;
                    break;
                }
            }
            pots = next;
        }
        let pots = gauge_fix(p, &pots);
        let coupling = coupling_from_potentials(p, &pots)?;
        let report = build_report(p, &pots, &coupling, sweeps, converged)?;
        let solution = Solution {
            coupling,
            potentials: pots,
            report,
        };
        if converged {
            Ok(solution)
        } else {
            Err(Error::NotConverged(Box::new(solution)))
        }
    })
}

/// Off-support `h`: `-eps log sum_i a_i exp((f_i + <g_i, x> - c(u_i, y)) / eps)`.
///
/// `x` is in the centered covariate frame of `p`.
pub fn extend_h(p: &Problem, pots: &Potentials, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let eps = p.epsilon();
    let (a, u) = (p.a(), p.u());
    let terms = (0..p.n()).map(|i| {
        let gx: f64 = (0..p.d_x()).map(|k| pots.g[(i, k)] * x[k]).sum();
        let c = 0.5 * (0..p.d_y()).map(|k| (u[(i, k)] - y[k]).powi(2)).sum::<f64>();
        a[i].ln() + (pots.f[i] + gx - c) / eps
    });
    -eps * logsumexp(terms)
}

fn cost_to(p: &Problem, u: &DVector<f64>) -> Vec<f64> {
    let y = p.y();
    (0..p.m())
        .map(|j| 0.5 * (0..p.d_y()).map(|k| (u[k] - y[(j, k)]).powi(2)).sum::<f64>())
        .collect()
}

/// Off-support `g`: the unique root of the mean-zero tilt condition at `u`.
pub fn extend_g(p: &Problem, pots: &Potentials, u: &DVector<f64>, opts: &SolverOptions) -> Result<DVector<f64>> {
    let tilt = Tilt::new(p, &pots.h, cost_to(p, u).into_iter());
    tilt.minimize(DVector::zeros(p.d_x()), opts)
}

/// Off-support `f`, using [`extend_g`] at `u`.
pub fn extend_f(p: &Problem, pots: &Potentials, u: &DVector<f64>, opts: &SolverOptions) -> Result<f64> {
    let tilt = Tilt::new(p, &pots.h, cost_to(p, u).into_iter());
    let theta = tilt.minimize(DVector::zeros(p.d_x()), opts)?;
    Ok(-tilt.value(&theta))
}
