//! Independent oracles shared by the integration tests: analytic Jacobians of
//! the built-in models, Newton refinement of their equilibria, and the
//! discrete-time magnitudes `|exp(λ Δt)|` of the continuous linearization.

#![allow(dead_code)]

use faer::Mat;
use koopman_roa::dynamics::{
    competition_rhs, mak_rhs, COMPETITION_DEFAULT_R, MAK_DEFAULT_DILUTION, MAK_DEFAULT_K,
};

pub fn competition_jacobian(x: &[f64]) -> Mat<f64> {
    let r = COMPETITION_DEFAULT_R;
    let (x1, x2) = (x[0], x[1]);
    let j = [
        [r[0] - 2.0 * r[1] * x1 - r[4] * x2, -r[4] * x1],
        [-r[5] * x2, r[2] - 2.0 * r[3] * x2 - r[5] * x1],
    ];
    Mat::from_fn(2, 2, |a, b| j[a][b])
}

pub fn mak_jacobian(x: &[f64]) -> Mat<f64> {
    let k = MAK_DEFAULT_K;
    let d = MAK_DEFAULT_DILUTION;
    let (s1, s2, s3, s4) = (x[0], x[1], x[2], x[3]);
    let (a1, a3) = (k[0] * s3 * s3, 2.0 * k[0] * s1 * s3);
    let (b2, b4) = (k[1] * s4 * s4, 2.0 * k[1] * s2 * s4);
    let j = [
        [-a1 - d, 0.0, -a3, 0.0, 0.0],
        [a1, -b2 - d, a3, -b4, 0.0],
        [a1, 0.0, a3 - k[2] - d, 0.0, 0.0],
        [0.0, b2, 0.0, b4 - k[3] - d, 0.0],
        [0.0, 0.0, k[2], k[3], -d],
    ];
    Mat::from_fn(5, 5, |a, b| j[a][b])
}

pub fn competition_field(x: &[f64]) -> Vec<f64> {
    competition_rhs(x, &COMPETITION_DEFAULT_R).to_vec()
}

pub fn mak_field(x: &[f64]) -> Vec<f64> {
    mak_rhs(x, &MAK_DEFAULT_K, MAK_DEFAULT_DILUTION).to_vec()
}

/// Newton's method on `f(x) = 0` with the analytic Jacobian.
pub fn newton(f: impl Fn(&[f64]) -> Vec<f64>, jac: impl Fn(&[f64]) -> Mat<f64>, x0: &[f64]) -> Vec<f64> {
    use faer::linalg::solvers::Solve;
    let n = x0.len();
    let mut x = x0.to_vec();
    for _ in 0..100 {
        let fx = f(&x);
        let rhs = Mat::from_fn(n, 1, |i, _| fx[i]);
        let dx = jac(&x).partial_piv_lu().solve(&rhs);
        let mut step = 0.0f64;
        for i in 0..n {
            x[i] -= dx[(i, 0)];
            step = step.max(dx[(i, 0)].abs());
        }
        if step < 1e-15 {
            break;
        }
    }
    x
}

/// `|exp(λᵢ Δt)|` of the continuous Jacobian, ascending.
pub fn discrete_magnitudes(j: &Mat<f64>, dt: f64) -> Vec<f64> {
    let mut m: Vec<f64> = j
        .eigenvalues()
        .expect("eigenvalues")
        .iter()
        .map(|l| (l.re * dt).exp())
        .collect();
    m.sort_by(f64::total_cmp);
    m
}

/// MAK equilibria at the default parameters, refined by Newton from rounded
/// estimates: working point, saddle, `x₄` wash-out, saddle, wash-out.
pub fn mak_equilibria() -> Vec<(&'static str, Vec<f64>)> {
    let seeds: [(&str, [f64; 5]); 5] = [
        ("A", [0.23, 0.09, 0.30, 0.54, 0.59]),
        ("B", [0.21, 0.67, 0.30, 0.07, 0.47]),
        ("C", [0.23, 0.76, 0.30, 0.00, 0.46]),
        ("D", [0.76, 0.23, 0.09, 0.00, 0.14]),
        ("E", [1.00, 0.00, 0.00, 0.00, 0.00]),
    ];
    seeds
        .iter()
        .map(|(name, s)| (*name, newton(mak_field, mak_jacobian, s)))
        .collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
