//! Trapezoid and Gauss–Hermite quadrature.

use nalgebra::{DMatrix, SymmetricEigen};

pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, points: usize) -> f64 {
    let h = (b - a) / (points - 1) as f64;
    let inner: f64 = (1..points - 1).map(|i| f(a + i as f64 * h)).sum();
    h * (inner + 0.5 * (f(a) + f(b)))
}

/// 2-D trapezoid rule on a square-cell grid.
pub fn trapezoid_2d(
    f: impl Fn(f64, f64) -> f64,
    (ax, bx): (f64, f64),
    (ay, by): (f64, f64),
    points: usize,
) -> f64 {
    let hx = (bx - ax) / (points - 1) as f64;
    let hy = (by - ay) / (points - 1) as f64;
    let w = |i: usize| if i == 0 || i == points - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for i in 0..points {
        for j in 0..points {
            total += w(i) * w(j) * f(ax + i as f64 * hx, ay + j as f64 * hy);
        }
    }
    total * hx * hy
}

/// Physicists' Gauss–Hermite rule: ∫ e^{-x²} g(x) dx ≈ Σ w_i g(x_i).
///
/// Golub–Welsch: nodes are eigenvalues of the Jacobi matrix, weights come from
/// the first eigenvector components.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = off;
        j[(k - 1, k)] = off;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// E[g(X)] for X ~ N(mean, sd²) with an `n`-node Gauss–Hermite rule.
pub fn normal_expectation(g: impl Fn(f64) -> f64, mean: f64, sd: f64, n: usize) -> f64 {
    let (x, w) = gauss_hermite(n);
    let norm = std::f64::consts::PI.sqrt();
    x.iter().zip(&w).map(|(xi, wi)| wi / norm * g(mean + std::f64::consts::SQRT_2 * sd * xi)).sum()
}

/// log ∫ exp(log_joint(x)) dx by adaptive Gauss–Hermite: the rule is centred
/// at the mode of `log_joint` and scaled by its curvature there.
pub fn log_integral_adaptive(log_joint: impl Fn(f64) -> f64, start: f64, n: usize) -> f64 {
    let h = 1e-4;
    let mut mode = start;
    for _ in 0..200 {
        let d1 = (log_joint(mode + h) - log_joint(mode - h)) / (2.0 * h);
        let d2 = (log_joint(mode + h) - 2.0 * log_joint(mode) + log_joint(mode - h)) / (h * h);
        let step = if d2 < 0.0 { -d1 / d2 } else { d1.signum() };
        let step = step.clamp(-5.0, 5.0);
        mode += step;
        if step.abs() < 1e-12 {
            break;
        }
    }
    let d2 = (log_joint(mode + h) - 2.0 * log_joint(mode) + log_joint(mode - h)) / (h * h);
    let sd = (-1.0 / d2).sqrt();
    let (x, w) = gauss_hermite(n);
    let terms: Vec<f64> = x
        .iter()
        .zip(&w)
        .map(|(xi, wi)| {
            let z = std::f64::consts::SQRT_2 * xi;
            let point = mode + sd * z;
            // ∫ f = ∫ (f / φ) φ with φ = N(mode, sd²); GH weights absorb e^{-x²}.
            let log_phi = -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            wi.ln() - 0.5 * std::f64::consts::PI.ln() + log_joint(point) - log_phi
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}
