#![allow(dead_code)]

use evqr::{DiscreteMeasure, GaussianModel, Problem, SymMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Random discrete instance with Gaussian atoms. `m > d_x` keeps the covariates
/// generically full rank.
pub fn random_problem(seed: u64, n: usize, m: usize, d_x: usize, d_y: usize, eps: f64) -> Problem {
    assert!(m > d_x);
    let mut r = rng(seed);
    let a = simplex(&mut r, n);
    let b = simplex(&mut r, m);
    let u = DMatrix::from_fn(n, d_y, |_, _| normal(&mut r));
    let xy = DMatrix::from_fn(m, d_x + d_y, |_, _| normal(&mut r));
    Problem::new(
        DiscreteMeasure::new(a, u).unwrap(),
        DiscreteMeasure::new(b, xy).unwrap(),
        d_x,
        eps,
    )
    .unwrap()
}

/// Random instance with `n, m <= 6` and `d_x, d_y <= 2`.
pub fn random_small_problem(seed: u64, eps: f64) -> Problem {
    let mut r = rng(seed ^ 0x5eed);
    let d_x = r.random_range(1..=2);
    let d_y = r.random_range(1..=2);
    let n = r.random_range(1..=6);
    let m = r.random_range(d_x + 2..=6);
    random_problem(seed, n, m, d_x, d_y, eps)
}

/// Random SPD covariance `A A^T / d + 0.2 I` split into blocks.
pub fn random_model(seed: u64, d_x: usize, d_y: usize) -> GaussianModel {
    let mut r = rng(seed);
    let d = d_x + d_y;
    let a = DMatrix::from_fn(d, d, |_, _| normal(&mut r));
    let s = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.2;
    let m_y = DVector::from_fn(d_y, |_, _| normal(&mut r));
    GaussianModel::new(
        m_y,
        SymMatrix::symmetrize(s.view((0, 0), (d_x, d_x)).into_owned()),
        s.view((0, d_x), (d_x, d_y)).into_owned(),
        SymMatrix::symmetrize(s.view((d_x, d_x), (d_y, d_y)).into_owned()),
    )
    .unwrap()
}

pub fn random_model_any(seed: u64) -> GaussianModel {
    let mut r = rng(seed ^ 0xabcd);
    let d_x = r.random_range(1..=5);
    let d_y = r.random_range(1..=5);
    random_model(seed, d_x, d_y)
}

pub fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}
