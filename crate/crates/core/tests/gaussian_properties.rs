mod common;

use common::{normal, random_model_any, rng};
use evqr::gaussian::{
    commutator_norm, delta_theta, delta_theta_residual, gaussian_dual_potentials, lambda_eps, limit_coupling,
    log_density_identity_residual, optimal_gaussian_coupling, precision_blocks, riccati_residual, subspace_distance,
    sweep_epsilon, w2_exact, w2_first_order,
};
use evqr::{GaussianModel, SymMatrix};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

const EPS_GRID: [f64; 4] = [1e-3, 1e-1, 1.0, 10.0];

/// Solves `omega l^2 + eps omega l = 1` on each eigenvalue of the conditional precision.
fn lambda_by_precision(model: &GaussianModel, eps: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(model.omega_yy().as_matrix().clone());
    let roots = eig.eigenvalues.map(|w| 0.5 * (-eps + (eps * eps + 4.0 / w).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn log_det(m: &DMatrix<f64>) -> f64 {
    let chol = m.clone().cholesky().unwrap();
    let l = chol.l();
    (0..m.nrows()).map(|k| 2.0 * l[(k, k)].ln()).sum()
}

#[test]
fn lambda_matches_precision_eigen_route() {
    for seed in 0..30 {
        let model = random_model_any(seed);
        for eps in EPS_GRID {
            let got = lambda_eps(&model, eps).unwrap();
            let want = lambda_by_precision(&model, eps);
            let gap = (got.as_matrix() - &want).amax() / want.amax();
            assert!(gap < 1e-10, "seed {seed} eps {eps}: {gap:e}");
            assert!(riccati_residual(&model, &got, eps) < 1e-10);
            assert!(commutator_norm(&model, &got) < 1e-10 * (1.0 + model.omega_yy().amax()));
        }
    }
}

#[test]
fn lambda_decreases_in_eps() {
    for seed in 0..20 {
        let model = random_model_any(seed);
        let mut prev = lambda_eps(&model, 0.0).unwrap();
        for eps in [1e-3, 1e-2, 1e-1, 1.0, 10.0] {
            let next = lambda_eps(&model, eps).unwrap();
            let diff = SymMatrix::symmetrize(prev.as_matrix() - next.as_matrix());
            assert!(diff.min_eigenvalue() > -1e-12, "seed {seed} eps {eps}");
            assert!(next.min_eigenvalue() > 0.0);
            prev = next;
        }
    }
}

#[test]
fn precision_blocks_hold_for_random_models() {
    for seed in 0..30 {
        let model = random_model_any(seed);
        for eps in EPS_GRID {
            let c = optimal_gaussian_coupling(&model, eps).unwrap();
            let r = precision_blocks(&c, eps).unwrap();
            assert!(r.max() < 1e-8, "seed {seed} eps {eps}: {r:?}");
            assert!(delta_theta_residual(&model, eps).unwrap() < 1e-8);
        }
    }
}

#[test]
fn scaled_delta_theta_vanishes_on_the_limit_support() {
    for seed in 0..10 {
        let model = random_model_any(seed);
        let (d_x, d_y) = (model.d_x(), model.d_y());
        let lo = lambda_eps(&model, 0.0).unwrap();
        let k = d_y + d_x;
        let mut basis = DMatrix::zeros(k + d_y, k);
        basis.view_mut((0, 0), (k, k)).fill_with_identity();
        basis.view_mut((k, 0), (d_y, d_y)).copy_from(lo.as_matrix());
        basis.view_mut((k, d_y), (d_y, d_x)).copy_from(&(-model.g().transpose()));
        let eps = 1e-6;
        let q = delta_theta(&model, eps).unwrap() * eps;
        assert!((&q - q.transpose()).amax() < 1e-14 * q.amax());
        let on_support = &q * &basis;
        assert!(on_support.amax() < 1e-5 * q.amax(), "seed {seed}: {:e}", on_support.amax());
    }
}

#[test]
fn density_matches_gaussian_log_ratio() {
    // log dpi/d(mu x nu) computed from a numerically inverted Gamma
    for seed in 0..20 {
        let model = random_model_any(seed);
        let (d_x, d_y) = (model.d_x(), model.d_y());
        for eps in [0.05, 0.5, 3.0] {
            let c = optimal_gaussian_coupling(&model, eps).unwrap();
            let gamma = c.gamma.as_matrix().clone();
            let theta = gamma.clone().try_inverse().unwrap();
            let sigma = model.sigma().into_inner();
            let sigma_inv = sigma.clone().try_inverse().unwrap();
            let n = 2 * d_y + d_x;
            let mut theta0 = DMatrix::zeros(n, n);
            theta0.view_mut((0, 0), (d_y, d_y)).fill_with_identity();
            theta0.view_mut((d_y, d_y), (d_x + d_y, d_x + d_y)).copy_from(&sigma_inv);
            let log_norm = log_det(&gamma) - log_det(&sigma);

            let pots = gaussian_dual_potentials(&model, eps).unwrap();
            let mut r = rng(seed + 500);
            let mut points = Vec::new();
            for _ in 0..25 {
                let w = DVector::from_fn(n, |_, _| normal(&mut r));
                let u = w.rows(0, d_y).into_owned();
                let x = w.rows(d_y, d_x).into_owned();
                let y = w.rows(d_y + d_x, d_y).into_owned();
                let lhs = (pots.f(&u) + pots.g(&u).dot(&x) + pots.h(&x, &y) - 0.5 * (&u - &y).norm_squared()) / eps;
                let z = &w - &c.mean;
                let rhs = -0.5 * z.dot(&((&theta - &theta0) * &z)) - 0.5 * log_norm;
                assert!((lhs - rhs).abs() < 1e-7 * (1.0 + rhs.abs()), "seed {seed} eps {eps}: {lhs} vs {rhs}");
                points.push(w);
            }
            assert!(log_density_identity_residual(&model, eps, &points).unwrap() < 1e-8);
        }
    }
}

#[test]
fn subspace_distance_matches_projection() {
    for seed in 0..20 {
        let model = random_model_any(seed);
        let (d_x, d_y) = (model.d_x(), model.d_y());
        let lo = lambda_eps(&model, 0.0).unwrap();
        let k = d_y + d_x;
        let n = k + d_y;
        let mut basis = DMatrix::zeros(n, k);
        basis.view_mut((0, 0), (k, k)).fill_with_identity();
        basis.view_mut((k, 0), (d_y, d_y)).copy_from(lo.as_matrix());
        basis.view_mut((k, d_y), (d_y, d_x)).copy_from(&(-model.g().transpose()));
        let gram = basis.transpose() * &basis;
        let proj = &basis * gram.try_inverse().unwrap() * basis.transpose();

        let mut r = rng(seed + 900);
        for _ in 0..5 {
            let res = DVector::from_fn(d_y, |_, _| normal(&mut r));
            let mut w = DVector::zeros(n);
            w.rows_mut(k, d_y).copy_from(&res);
            let want = (&w - &proj * &w).norm();
            let got = subspace_distance(&model, &res).unwrap();
            assert!((got - want).abs() < 1e-10 * (1.0 + want), "seed {seed}: {got} vs {want}");
        }
        // the limit covariance lives on that subspace
        let gamma_o = limit_coupling(&model).unwrap().gamma.into_inner();
        let off = &gamma_o - &proj * &gamma_o;
        assert!(off.amax() < 1e-10 * (1.0 + gamma_o.amax()));
    }
}

#[test]
fn w2_vanishes_linearly_for_random_models() {
    for seed in 0..10 {
        let model = random_model_any(seed);
        let coef = w2_first_order(&model).unwrap();
        assert!(coef > 0.0);
        let w_small = w2_exact(&model, 1e-5).unwrap();
        assert!((w_small / 1e-5 - coef).abs() < 1e-2 * coef, "seed {seed}");
        assert_eq!(w2_exact(&model, 0.0).unwrap(), 0.0);
    }
}

#[test]
fn sweep_rows_follow_input_order() {
    let model = GaussianModel::scalar(0.6).unwrap();
    let grid = [1e-2, 1e-4, 1e-1, 1e-3];
    let rows = sweep_epsilon(&model, &grid).unwrap();
    let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    assert_eq!(eps, grid);
    assert!(sweep_epsilon(&model, &[1e-2, -1.0]).is_err());
}
