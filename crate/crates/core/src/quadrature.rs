//! Numerical integration: Gauss–Hermite rules for the standard normal weight
//! and adaptive Simpson on finite intervals.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Nodes and weights of the `m`-point rule with
/// `sum_i w_i f(x_i) ≈ ∫ f(x) φ(x) dx`, φ the standard normal density.
///
/// Built by Golub–Welsch from the Jacobi matrix of the probabilists'
/// Hermite recurrence; weights sum to one.
pub fn gauss_hermite(m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m == 0 {
        return Err(Error::Domain("quadrature needs at least one node".into()));
    }
    let mut jac = DMatrix::zeros(m, m);
    for k in 1..m {
        let off = (k as f64).sqrt();
        jac[(k - 1, k)] = off;
        jac[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(pairs.into_iter().map(|(x, w)| (x, w / total)).unzip())
}

/// Adaptive Simpson integral of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite() && tol > 0.0) {
        return Err(Error::Domain("integration bounds must be finite and tol positive".into()));
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let v = simpson_step(&f, a, b, fa, fm, fb, whole, tol, 50);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("integrand".into()))
    }
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_hermite_moments() {
        let (x, w) = gauss_hermite(20).unwrap();
        let moment = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert_abs_diff_eq!(moment(0), 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(moment(1), 0.0, epsilon = 1e-13);
        assert_abs_diff_eq!(moment(2), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(moment(4), 3.0, epsilon = 1e-11);
        assert_abs_diff_eq!(moment(8), 105.0, epsilon = 1e-9);
        let (x1, w1) = gauss_hermite(1).unwrap();
        assert_eq!((x1[0], w1[0]), (0.0, 1.0));
        assert!(gauss_hermite(0).is_err());
    }

    #[test]
    fn simpson_integrals() {
        let v = adaptive_simpson(|x| x.sin(), 0.0, std::f64::consts::PI, 1e-12).unwrap();
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-10);
        let g = adaptive_simpson(|x| (-0.5 * x * x).exp(), -12.0, 12.0, 1e-12).unwrap();
        assert_abs_diff_eq!(g, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-9);
        assert!(adaptive_simpson(|x| x, 0.0, f64::INFINITY, 1e-6).is_err());
    }
}
