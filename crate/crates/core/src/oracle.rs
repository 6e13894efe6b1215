//! Dense reference solver for tiny instances.
//!
//! Maximizes the full dual objective jointly over the stacked vector
//! `(f, g, h)` with damped Newton steps on the complete Hessian, regularized
//! by the gradient norm so that steps stay bounded while most coupling
//! entries underflow. The affine
//! gauge is pinned by the linear constraints `sum_i a_i f_i = 0` and
//! `sum_i a_i g_i = 0`, imposed inside the Newton system, so the KKT matrix is
//! nonsingular. The objective, gradient and coupling are evaluated here
//! directly and do not go through [`crate::solver`].

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{validate_problem, Problem};
use crate::solver::{self, Coupling, Potentials, SolverOptions};

/// Largest `n * m` the oracle accepts.
pub const SIZE_LIMIT: usize = 200;
const MAX_ITER: usize = 500;
const GRAD_TOL: f64 = 1e-13;
/// Largest change of any exponent, in units of `eps`, over one step.
const MAX_REACH: f64 = 50.0;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub pi: Coupling,
    pub potentials: Potentials,
    /// Dual value at the returned potentials.
    pub value: f64,
    /// Max-norm of the dual gradient: marginal and row-mean violations.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Stacked layout: `f` (n), then `g` row-major (n * d_x), then `h` (m).
struct Layout {
    n: usize,
    m: usize,
    d_x: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.n + self.n * self.d_x + self.m
    }
    fn f(&self, i: usize) -> usize {
        i
    }
    fn g(&self, i: usize, k: usize) -> usize {
        self.n + i * self.d_x + k
    }
    fn h(&self, j: usize) -> usize {
        self.n + self.n * self.d_x + j
    }
    fn unpack(&self, z: &DVector<f64>) -> Potentials {
        Potentials {
            f: DVector::from_fn(self.n, |i, _| z[self.f(i)]),
            g: DMatrix::from_fn(self.n, self.d_x, |i, k| z[self.g(i, k)]),
            h: DVector::from_fn(self.m, |j, _| z[self.h(j)]),
        }
    }
    fn pack(&self, pots: &Potentials) -> DVector<f64> {
        let mut z = DVector::zeros(self.len());
        for i in 0..self.n {
            z[self.f(i)] = pots.f[i];
            for k in 0..self.d_x {
                z[self.g(i, k)] = pots.g[(i, k)];
            }
        }
        for j in 0..self.m {
            z[self.h(j)] = pots.h[j];
        }
        z
    }
}

struct Dual<'a> {
    p: &'a Problem,
    lay: Layout,
}

impl Dual<'_> {
    /// `pi_ij = a_i b_j exp((f_i + <g_i, x_j> + h_j - c_ij) / eps)`, straight exponentiation.
    fn plan(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let p = self.p;
        let (a, b, c, x, eps) = (p.a(), p.b(), p.cost(), p.x(), p.epsilon());
        DMatrix::from_fn(self.lay.n, self.lay.m, |i, j| {
            let mut e = z[self.lay.f(i)] + z[self.lay.h(j)] - c[(i, j)];
            for k in 0..self.lay.d_x {
                e += z[self.lay.g(i, k)] * x[(j, k)];
            }
            a[i] * b[j] * (e / eps).exp()
        })
    }

    /// `max_ij |dz_{f_i} + <dz_{g_i}, x_j> + dz_{h_j}| / eps`.
    fn reach(&self, dz: &DVector<f64>) -> f64 {
        let x = self.p.x();
        let mut reach = 0.0_f64;
        for i in 0..self.lay.n {
            for j in 0..self.lay.m {
                let mut e = dz[self.lay.f(i)] + dz[self.lay.h(j)];
                for k in 0..self.lay.d_x {
                    e += dz[self.lay.g(i, k)] * x[(j, k)];
                }
                reach = reach.max(e.abs());
            }
        }
        reach / self.p.epsilon()
    }

    fn value(&self, z: &DVector<f64>, pi: &DMatrix<f64>) -> f64 {
        let p = self.p;
        let lin: f64 = (0..self.lay.n).map(|i| p.a()[i] * z[self.lay.f(i)]).sum::<f64>()
            + (0..self.lay.m).map(|j| p.b()[j] * z[self.lay.h(j)]).sum::<f64>();
        lin - p.epsilon() * (pi.sum() - 1.0)
    }

    fn gradient(&self, pi: &DMatrix<f64>) -> DVector<f64> {
        let p = self.p;
        let x = p.x();
        let mut grad = DVector::zeros(self.lay.len());
        for i in 0..self.lay.n {
            grad[self.lay.f(i)] = p.a()[i] - pi.row(i).sum();
            for k in 0..self.lay.d_x {
                grad[self.lay.g(i, k)] = -(0..self.lay.m).map(|j| pi[(i, j)] * x[(j, k)]).sum::<f64>();
            }
        }
        for j in 0..self.lay.m {
            grad[self.lay.h(j)] = p.b()[j] - pi.column(j).sum();
        }
        grad
    }

    /// Negated Hessian: `(1/eps) sum_ij pi_ij phi_ij phi_ij^T` with
    /// `phi_ij = e_{f_i} + x_j (on the g_i block) + e_{h_j}`.
    fn curvature(&self, pi: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.p.x();
        let n = self.lay.len();
        let mut hess = DMatrix::zeros(n, n);
        let mut idx = Vec::with_capacity(2 + self.lay.d_x);
        let mut val = Vec::with_capacity(2 + self.lay.d_x);
        for i in 0..self.lay.n {
            for j in 0..self.lay.m {
                idx.clear();
                val.clear();
                idx.push(self.lay.f(i));
                val.push(1.0);
                for k in 0..self.lay.d_x {
                    idx.push(self.lay.g(i, k));
                    val.push(x[(j, k)]);
                }
                idx.push(self.lay.h(j));
                val.push(1.0);
                let w = pi[(i, j)];
                for (r, vr) in idx.iter().zip(&val) {
                    for (s, vs) in idx.iter().zip(&val) {
                        hess[(*r, *s)] += w * vr * vs;
                    }
                }
            }
        }
        hess / self.p.epsilon()
    }

    /// Gauge rows: `a^T f = 0` and `sum_i a_i g_i = 0`.
    fn constraints(&self) -> DMatrix<f64> {
        let a = self.p.a();
        let mut c = DMatrix::zeros(1 + self.lay.d_x, self.lay.len());
        for i in 0..self.lay.n {
            c[(0, self.lay.f(i))] = a[i];
            for k in 0..self.lay.d_x {
                c[(1 + k, self.lay.g(i, k))] = a[i];
            }
        }
        c
    }
}

/// Solves a small instance by global damped Newton on the dual.
pub fn oracle_solve(p: &Problem) -> Result<OracleResult> {
    let size = p.n() * p.m();
    if size > SIZE_LIMIT {
        return Err(Error::SizeGuard {
            size,
            limit: SIZE_LIMIT,
        });
    }
    let validation = validate_problem(p);
    if !validation.feasible {
        return Err(Error::ConstraintInfeasible(validation.messages.join("; ")));
    }

    let dual = Dual {
        p,
        lay: Layout {
            n: p.n(),
            m: p.m(),
            d_x: p.d_x(),
        },
    };
    let nv = dual.lay.len();
    let cons = dual.constraints();
    let nc = cons.nrows();

    let mut z = DVector::zeros(nv);
    let mut pi = dual.plan(&z);
    let mut value = dual.value(&z, &pi);
    let mut grad = dual.gradient(&pi);

    for iter in 0..MAX_ITER {
        if grad.amax() <= GRAD_TOL {
            return Ok(finish(&dual, z, pi, value, grad.amax(), iter));
        }
        let mut kkt = DMatrix::zeros(nv + nc, nv + nc);
        let mut curv = dual.curvature(&pi);
        let mu = grad.amax();
        for r in 0..nv {
            curv[(r, r)] += mu;
        }
        kkt.view_mut((0, 0), (nv, nv)).copy_from(&curv);
        kkt.view_mut((nv, 0), (nc, nv)).copy_from(&cons);
        kkt.view_mut((0, nv), (nv, nc)).copy_from(&cons.transpose());
        let mut rhs = DVector::zeros(nv + nc);
        rhs.rows_mut(0, nv).copy_from(&grad);
        rhs.rows_mut(nv, nc).copy_from(&(-(&cons * &z)));
        let sol = kkt
            .full_piv_lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoConvergence("oracle KKT system is singular".into()))?;
        let mut step = sol.rows(0, nv).into_owned();
        let reach = dual.reach(&step);
        if reach > MAX_REACH {
            step *= MAX_REACH / reach;
        }
        let slope = grad.dot(&step);
        if slope <= 0.0 {
            // ascent direction lost to roundoff: at the noise floor
            break;
        }

        let slack = 8.0 * f64::EPSILON * (value.abs() + 1.0);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial = &z + &step * t;
            let trial_pi = dual.plan(&trial);
            let trial_value = dual.value(&trial, &trial_pi);
            if trial_value.is_finite() && trial_value >= value + 1e-4 * t * slope - slack {
                z = trial;
                pi = trial_pi;
                value = trial_value;
                grad = dual.gradient(&pi);
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let residual = grad.amax();
    if residual <= 1e-10 {
        Ok(finish(&dual, z, pi, value, residual, MAX_ITER))
    } else {
        Err(Error::NoConvergence(format!(
            "oracle Newton stopped with KKT residual {residual:e}"
        )))
    }
}

fn finish(dual: &Dual<'_>, z: DVector<f64>, pi: DMatrix<f64>, value: f64, kkt: f64, iterations: usize) -> OracleResult {
    OracleResult {
        pi: Coupling { pi },
        potentials: dual.lay.unpack(&z),
        value,
        kkt_residual: kkt,
        iterations,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleComparison {
    /// `sum |pi_solver - pi_oracle|`.
    pub coupling_l1_gap: f64,
    /// `|D_solver - D_oracle| / (1 + |D_oracle|)`.
    pub value_gap: f64,
    /// Sup-norm gap between gauge-fixed potentials.
    pub potential_sup_gap: f64,
    pub oracle_value: f64,
    pub solver_value: f64,
    pub oracle_kkt_residual: f64,
    pub solver_sweeps: usize,
}

impl OracleComparison {
    pub const COUPLING_TOL: f64 = 1e-6;
    pub const VALUE_TOL: f64 = 1e-8;
    pub const POTENTIAL_TOL: f64 = 1e-6;

    pub fn passes(&self) -> bool {
        self.coupling_l1_gap <= Self::COUPLING_TOL
            && self.value_gap <= Self::VALUE_TOL
            && self.potential_sup_gap <= Self::POTENTIAL_TOL
    }
}

/// Runs the block solver and the oracle on the same instance and reports the gaps.
pub fn oracle_compare(p: &Problem, opts: &SolverOptions) -> Result<OracleComparison> {
    let size = p.n() * p.m();
    if size > SIZE_LIMIT {
        return Err(Error::SizeGuard {
            size,
            limit: SIZE_LIMIT,
        });
    }
    let sol = solver::solve(p, opts)?;
    let orc = oracle_solve(p)?;
    let orc_pots = solver::gauge_fix(p, &orc.potentials);
    Ok(OracleComparison {
        coupling_l1_gap: sol.coupling.l1_distance(&orc.pi),
        value_gap: (sol.report.dual_value - orc.value).abs() / (1.0 + orc.value.abs()),
        potential_sup_gap: sol.potentials.sup_distance(&orc_pots),
        oracle_value: orc.value,
        solver_value: sol.report.dual_value,
        oracle_kkt_residual: orc.kkt_residual,
        solver_sweeps: sol.report.sweeps,
    })
}

/// Packs potentials into the oracle's stacked layout. Exposed for tests.
pub fn stacked(p: &Problem, pots: &Potentials) -> DVector<f64> {
    Layout {
        n: p.n(),
        m: p.m(),
        d_x: p.d_x(),
    }
    .pack(pots)
}
