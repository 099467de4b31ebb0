//! Small fitting toolbox: linear least squares, cosine fits, exponential
//! decay fits, oscillation fits, a Nelder-Mead simplex for few-parameter
//! nonlinear refinement, and Savitzky-Golay smoothing coefficients.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fit failed: {0}")]
    Failed(String),
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut y = x % two_pi;
    if y <= -std::f64::consts::PI {
        y += two_pi;
    } else if y > std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

/// Solve min ‖A·c - y‖₂ via SVD; returns the coefficient vector.
pub fn linear_least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, FitError> {
    let svd = a.clone().svd(true, true);
    svd.solve(y, 1e-12).map_err(|e| FitError::Failed(e.to_string()))
}

/// Fit y ≈ amp·cos(θ - phase) + offset. Returns (amp, phase, offset) with
/// amp ≥ 0 and phase in (-pi, pi].
pub fn cosine_fit(thetas: &[f64], values: &[f64]) -> Result<(f64, f64, f64), FitError> {
    if thetas.len() != values.len() || thetas.len() < 3 {
        return Err(FitError::Failed("need at least 3 points for a cosine fit".into()));
    }
    let n = thetas.len();
    let mut a = DMatrix::zeros(n, 3);
    for (i, &t) in thetas.iter().enumerate() {
        a[(i, 0)] = t.cos();
        a[(i, 1)] = t.sin();
        a[(i, 2)] = 1.0;
    }
    let y = DVector::from_column_slice(values);
    let c = linear_least_squares(&a, &y)?;
    let amp = c[0].hypot(c[1]);
    let phase = c[1].atan2(c[0]);
    Ok((amp, phase, c[2]))
}

/// Nelder-Mead simplex minimization for low-dimensional refinement.
/// Deterministic; runs a fixed budget and returns the best vertex.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    initial_step: &[f64],
    max_iter: usize,
) -> (Vec<f64>, f64) {
    let d = x0.len();
    assert_eq!(initial_step.len(), d);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let fx0 = f(x0);
    simplex.push((x0.to_vec(), fx0));
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += initial_step[i];
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        if (worst - best).abs() <= 1e-14 * (1.0 + best.abs()) {
            break;
        }
        // centroid of all but worst
        let mut cen = vec![0.0; d];
        for (v, _) in simplex.iter().take(d) {
            for (c, &vi) in cen.iter_mut().zip(v) {
                *c += vi / d as f64;
            }
        }
        let reflect: Vec<f64> =
            cen.iter().zip(&simplex[d].0).map(|(&c, &w)| c + alpha * (c - w)).collect();
        let fr = f(&reflect);
        if fr < simplex[0].1 {
            let expand: Vec<f64> =
                cen.iter().zip(&reflect).map(|(&c, &r)| c + gamma * (r - c)).collect();
            let fe = f(&expand);
            simplex[d] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (reflect, fr);
        } else {
            let contract: Vec<f64> =
                cen.iter().zip(&simplex[d].0).map(|(&c, &w)| c + rho * (w - c)).collect();
            let fc = f(&contract);
            if fc < simplex[d].1 {
                simplex[d] = (contract, fc);
            } else {
                let best_v = simplex[0].0.clone();
                for (v, fv) in simplex.iter_mut().skip(1) {
                    for (vi, &bi) in v.iter_mut().zip(&best_v) {
                        *vi = bi + sigma * (*vi - bi);
                    }
                    *fv = f(v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0).into()
}

/// Savitzky-Golay smoothing weights for a centered window of `2m+1` points
/// and polynomial order `order`: the smoothed value is the order-`order`
/// polynomial least-squares fit evaluated at the window center.
pub fn savitzky_golay_weights(m: usize, order: usize) -> Vec<f64> {
    let n = 2 * m + 1;
    assert!(order < n, "window too small for polynomial order");
    let mut a = DMatrix::zeros(n, order + 1);
    for i in 0..n {
        let x = i as f64 - m as f64;
        let mut p = 1.0;
        for j in 0..=order {
            a[(i, j)] = p;
            p *= x;
        }
    }
    // weights = e0ᵀ·(AᵀA)⁻¹·Aᵀ
    let ata = a.transpose() * &a;
    let inv = ata.try_inverse().expect("SG normal matrix is invertible");
    let w = a * inv.column(0);
    w.iter().copied().collect()
}

/// Smooth a series with centered Savitzky-Golay weights, shrinking the
/// window near the edges (re-fitting on the truncated window).
pub fn savitzky_golay_smooth(y: &[f64], m: usize, order: usize) -> Vec<f64> {
    let w = savitzky_golay_weights(m, order);
    let n = y.len();
    let mut out = vec![0.0; n];
    for i in 0..n {
        if i >= m && i + m < n {
            let mut acc = 0.0;
            for (k, &wk) in w.iter().enumerate() {
                acc += wk * y[i + k - m];
            }
            out[i] = acc;
        } else {
            // edge: largest symmetric window that fits
            let mm = i.min(n - 1 - i);
            if mm == 0 || 2 * mm < order {
                out[i] = y[i];
            } else {
                let we = savitzky_golay_weights(mm, order.min(2 * mm));
                let mut acc = 0.0;
                for (k, &wk) in we.iter().enumerate() {
                    acc += wk * y[i + k - mm];
                }
                out[i] = acc;
            }
        }
    }
    out
}
