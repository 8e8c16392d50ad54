//! Hermite polynomials, sample cumulants, fitted cumulant coefficients and
//! the explicit third-order Edgeworth expansion of a studentized statistic.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Highest Hermite order exposed publicly.
pub const MAX_HERMITE_ORDER: usize = 6;

/// Probabilists' Hermite polynomial `H_k(x)`, `0 <= k <= 6`.
pub fn hermite_poly(k: usize, x: f64) -> Result<f64> {
    if k > MAX_HERMITE_ORDER {
        return Err(Error::Domain(format!(
            "Hermite order {k} exceeds {MAX_HERMITE_ORDER}"
        )));
    }
    Ok(hermite(k, x))
}

fn hermite(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if k == 0 {
        return prev;
    }
    for j in 1..k {
        let next = x * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Scaled Hermite polynomial `e^{-k} H_k(x / e)`.
fn hermite_scaled(k: usize, x: f64, e: f64) -> f64 {
    hermite(k, x / e) / e.powi(k as i32)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Empirical cumulants of a Monte Carlo sample with jackknife standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulantSet {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub se1: f64,
    pub se2: f64,
    pub se3: f64,
    pub se4: f64,
    pub r: usize,
}

impl CumulantSet {
    pub fn values(&self) -> [f64; 4] {
        [self.k1, self.k2, self.k3, self.k4]
    }

    pub fn std_errors(&self) -> [f64; 4] {
        [self.se1, self.se2, self.se3, self.se4]
    }
}

/// k-statistics from power sums `s[p] = Σ y^p` (`s[0] = n`) of shifted data;
/// `shift` is added back to the first cumulant. Returns as many orders as
/// `n` supports (up to four).
fn k_from_power_sums(s: [f64; 5], shift: f64) -> Vec<f64> {
    let n = s[0];
    let (s1, s2, s3, s4) = (s[1], s[2], s[3], s[4]);
    let mut out = vec![shift + s1 / n];
    if n >= 2.0 {
        out.push((n * s2 - s1 * s1) / (n * (n - 1.0)));
    }
    if n >= 3.0 {
        out.push((2.0 * s1.powi(3) - 3.0 * n * s1 * s2 + n * n * s3) / (n * (n - 1.0) * (n - 2.0)));
    }
    if n >= 4.0 {
        let num = -6.0 * s1.powi(4) + 12.0 * n * s1 * s1 * s2
            - 3.0 * n * (n - 1.0) * s2 * s2
            - 4.0 * n * (n + 1.0) * s1 * s3
            + n * n * (n + 1.0) * s4;
        out.push(num / (n * (n - 1.0) * (n - 2.0) * (n - 3.0)));
    }
    out
}

fn shifted_power_sums(samples: &[f64], shift: f64) -> [f64; 5] {
    let mut s = [samples.len() as f64, 0.0, 0.0, 0.0, 0.0];
    for &x in samples {
        let y = x - shift;
        let y2 = y * y;
        s[1] += y;
        s[2] += y2;
        s[3] += y2 * y;
        s[4] += y2 * y2;
    }
    s
}

fn sample_mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Unbiased k-statistics `k_1..k_m`, `m = min(len, 4)`.
pub fn k_statistics(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::Domain("k-statistics need at least two samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cumulant sample".into()));
    }
    let shift = sample_mean(samples);
    let s = shifted_power_sums(samples, shift);
    if s[2] <= 0.0 {
        return Err(Error::Degenerate("sample variance is zero".into()));
    }
    Ok(k_from_power_sums(s, shift))
}

/// k-statistics `k_1..k_4` with delete-one jackknife standard errors.
pub fn sample_cumulants(samples: &[f64]) -> Result<CumulantSet> {
    let r = samples.len();
    if r < 5 {
        return Err(Error::Domain(format!("cumulants need at least 5 samples, got {r}")));
    }
    let k = k_statistics(samples)?;
    let shift = sample_mean(samples);
    let s = shifted_power_sums(samples, shift);
    let mut sum = [0.0f64; 4];
    let mut sum_sq = [0.0f64; 4];
    for &x in samples {
        let y = x - shift;
        let y2 = y * y;
        let loo = [s[0] - 1.0, s[1] - y, s[2] - y2, s[3] - y2 * y, s[4] - y2 * y2];
        let kj = k_from_power_sums(loo, shift);
        for p in 0..4 {
            sum[p] += kj[p];
            sum_sq[p] += kj[p] * kj[p];
        }
    }
    let rf = r as f64;
    let se: Vec<f64> = (0..4)
        .map(|p| {
            let mean = sum[p] / rf;
            let ss = (sum_sq[p] - rf * mean * mean).max(0.0);
            ((rf - 1.0) / rf * ss).sqrt()
        })
        .collect();
    Ok(CumulantSet {
        k1: k[0],
        k2: k[1],
        k3: k[2],
        k4: k[3],
        se1: se[0],
        se2: se[1],
        se3: se[2],
        se4: se[3],
        r,
    })
}

/// The eight cumulant-expansion coefficients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub beta_11: f64,
    pub beta_21: f64,
    pub beta_22: f64,
    pub beta_31: f64,
    pub beta_32: f64,
    pub beta_41: f64,
    pub beta_42: f64,
    pub beta_43: f64,
}

impl Betas {
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.beta_11,
            self.beta_21,
            self.beta_22,
            self.beta_31,
            self.beta_32,
            self.beta_41,
            self.beta_42,
            self.beta_43,
        ]
    }

    pub fn from_array(b: [f64; 8]) -> Self {
        Self {
            beta_11: b[0],
            beta_21: b[1],
            beta_22: b[2],
            beta_31: b[3],
            beta_32: b[4],
            beta_41: b[5],
            beta_42: b[6],
            beta_43: b[7],
        }
    }

    /// Leading-order cumulants `(k1, k2, k3, k4)` implied at sample size `n`
    /// and block count `b`, with `e_sq` the variance ratio.
    pub fn implied_cumulants(&self, n: f64, b: f64, e_sq: f64) -> [f64; 4] {
        let rn = n.powf(-0.5);
        [
            rn * self.beta_11,
            e_sq + self.beta_21 / b + self.beta_22 / n,
            rn * self.beta_31 + b.powf(-1.5) * self.beta_32,
            self.beta_41 / b + self.beta_42 / n + b.powf(-1.5) * self.beta_43,
        ]
    }
}

/// Everything needed to evaluate the expansion at one `(n, ℓ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSpec {
    #[serde(flatten)]
    pub betas: Betas,
    pub e_n: f64,
    pub a_n_inv: f64,
    pub n: u64,
    pub b_n: f64,
}

impl ExpansionSpec {
    /// Validated spec; `a_n_inv` is passed explicitly because fitted
    /// coefficients are paired with analytic variance targets.
    pub fn new(betas: Betas, e_n: f64, a_n_inv: f64, n: u64, b_n: f64) -> Result<Self> {
        if !(e_n.is_finite() && e_n > 0.0) {
            return Err(Error::Domain(format!("e_n must be positive, got {e_n}")));
        }
        if n == 0 || !(b_n.is_finite() && b_n > 0.0) {
            return Err(Error::Domain("n and b_n must be positive".into()));
        }
        if !a_n_inv.is_finite() || betas.to_array().iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("expansion coefficients".into()));
        }
        Ok(Self { betas, e_n, a_n_inv, n, b_n })
    }

    /// Spec with `a_n_inv = 1/e_n - 1` and `b_n = n/ℓ`.
    pub fn from_block(betas: Betas, e_n: f64, n: u64, ell: usize) -> Result<Self> {
        if ell == 0 {
            return Err(Error::Lag { lag: 0, n: n as usize });
        }
        Self::new(betas, e_n, 1.0 / e_n - 1.0, n, n as f64 / ell as f64)
    }
}

/// One `(n, ℓ)` design point for [`fit_betas`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: u64,
    pub ell: usize,
    pub cumulants: CumulantSet,
    pub e_n_sq: f64,
}

/// Fitted coefficients with their least-squares standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaFit {
    pub betas: Betas,
    pub std_errors: Betas,
}

/// Weighted least squares `y ~ X` with weights `w`; returns (coef, se).
fn weighted_ls(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (rows, cols) = x.shape();
    let mut a = DMatrix::zeros(rows, cols);
    let mut b = DVector::zeros(rows);
    for i in 0..rows {
        let sw = w[i].sqrt();
        for j in 0..cols {
            a[(i, j)] = sw * x[(i, j)];
        }
        b[i] = sw * y[i];
    }
    // Column equilibration keeps the rank test scale free.
    let scale: Vec<f64> = (0..cols).map(|j| a.column(j).norm()).collect();
    if scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return Err(Error::RankDeficient { order });
    }
    for j in 0..cols {
        a.column_mut(j).scale_mut(1.0 / scale[j]);
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax {
        return Err(Error::RankDeficient { order });
    }
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut coef = vec![0.0; cols];
    let mut var = vec![0.0; cols];
    for k in 0..cols {
        let sk = svd.singular_values[k];
        let proj = u.column(k).dot(&b) / sk;
        for j in 0..cols {
            coef[j] += v_t[(k, j)] * proj;
            var[j] += (v_t[(k, j)] / sk).powi(2);
        }
    }
    let se = (0..cols).map(|j| var[j].sqrt() / scale[j]).collect();
    let coef = (0..cols).map(|j| coef[j] / scale[j]).collect();
    Ok((coef, se))
}

/// Fits the coefficients of the cumulant expansions across a grid of
/// `(n, ℓ)` points by weighted least squares, one regression per order.
pub fn fit_betas(grid: &[GridPoint]) -> Result<BetaFit> {
    if grid.len() < 3 {
        return Err(Error::Config(format!("beta fit needs at least 3 grid points, got {}", grid.len())));
    }
    for (i, g) in grid.iter().enumerate() {
        if g.ell == 0 || g.n as usize <= g.ell {
            return Err(Error::Lag { lag: g.ell, n: g.n as usize });
        }
        if grid[..i].iter().any(|h| (h.n, h.ell) == (g.n, g.ell)) {
            return Err(Error::Config(format!("duplicate grid point ({}, {})", g.n, g.ell)));
        }
        let se = g.cumulants.std_errors();
        if se.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Domain(format!(
                "grid point ({}, {}) has a non-positive cumulant standard error",
                g.n, g.ell
            )));
        }
    }
    let m = grid.len();
    let design = |f: &dyn Fn(f64, f64) -> Vec<f64>, cols: usize| {
        DMatrix::from_fn(m, cols, |i, j| {
            let n = grid[i].n as f64;
            f(n, n / grid[i].ell as f64)[j]
        })
    };
    let weights = |p: usize| -> Vec<f64> {
        grid.iter().map(|g| g.cumulants.std_errors()[p].powi(-2)).collect()
    };
    let resp = |f: &dyn Fn(&GridPoint) -> f64| DVector::from_iterator(m, grid.iter().map(f));

    let (c1, s1) = weighted_ls(
        &design(&|n, _| vec![n.powf(-0.5)], 1),
        &resp(&|g| g.cumulants.k1),
        &weights(0),
        1,
    )?;
    let (c2, s2) = weighted_ls(
        &design(&|n, b| vec![1.0 / b, 1.0 / n], 2),
        &resp(&|g| g.cumulants.k2 - g.e_n_sq),
        &weights(1),
        2,
    )?;
    let (c3, s3) = weighted_ls(
        &design(&|n, b| vec![n.powf(-0.5), b.powf(-1.5)], 2),
        &resp(&|g| g.cumulants.k3),
        &weights(2),
        3,
    )?;
    let (c4, s4) = weighted_ls(
        &design(&|n, b| vec![1.0 / b, 1.0 / n, b.powf(-1.5)], 3),
        &resp(&|g| g.cumulants.k4),
        &weights(3),
        4,
    )?;
    let pack = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| {
        Betas::from_array([a[0], b[0], b[1], c[0], c[1], d[0], d[1], d[2]])
    };
    Ok(BetaFit {
        betas: pack(&c1, &c2, &c3, &c4),
        std_errors: pack(&s1, &s2, &s3, &s4),
    })
}

/// Density `ψ*` of the preliminary expansion.
pub fn preliminary_density(x: f64, spec: &ExpansionSpec) -> f64 {
    let e = spec.e_n;
    let b = &spec.betas;
    let h = |k| hermite_scaled(k, x, e);
    let q1 = b.beta_11 * h(1) + b.beta_31 * h(3) / 6.0;
    let q2 = b.beta_21 * h(2) / 2.0 + b.beta_41 * h(4) / 24.0;
    let q3 = b.beta_22 * h(2) / 2.0
        + b.beta_42 * h(4) / 24.0
        + b.beta_11 * b.beta_11 * h(2) / 2.0
        + b.beta_31 * b.beta_31 * h(6) / 72.0
        + b.beta_11 * b.beta_31 * h(4) / 6.0;
    let q4 = b.beta_32 * h(3) / 6.0 + b.beta_43 * h(4) / 24.0;
    let n = spec.n as f64;
    let bn = spec.b_n;
    let correction = 1.0 + q1 / n.sqrt() + q2 / bn + q3 / n + q4 * bn.powf(-1.5);
    phi(x / e) / e * correction
}

static WIDE_A_WARNED: AtomicBool = AtomicBool::new(false);

/// Distribution function `Ψ` of the third-order expansion.
pub fn expansion_cdf(x: f64, spec: &ExpansionSpec) -> f64 {
    let a = spec.a_n_inv;
    if a.abs() > 0.5 && !WIDE_A_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("|a_n_inv| = {:.3} > 0.5: expansion is outside its validity regime", a.abs());
    }
    let e = spec.e_n;
    let b = &spec.betas;
    let h = |k| hermite(k, x);
    let (e2, e3, e4) = (e * e, e * e * e, e * e * e * e);
    let bracket = x * a - x.powi(3) * a * a / 2.0 + x.powi(3) * h(2) * a.powi(3) / 6.0;
    let p1 = -(b.beta_11 + b.beta_31 / e3 * h(2) / 6.0);
    let p2 = b.beta_31 / e3 * x * h(3) / 6.0;
    let p3 = -(b.beta_21 / (2.0 * e2) * h(1) + b.beta_41 / (24.0 * e4) * h(3));
    let p4 = b.beta_21 / (2.0 * e2) * x * h(2) + b.beta_41 / (24.0 * e4) * x * h(4);
    let p5 = -((b.beta_22 + b.beta_11 * b.beta_11) / 2.0 * h(1)
        + b.beta_42 / 24.0 * h(3)
        + b.beta_31 * b.beta_31 / 72.0 * h(5)
        + b.beta_11 * b.beta_31 / 6.0 * h(3));
    let p6 = -(b.beta_32 * h(2) / 6.0 + b.beta_43 * h(3) / 24.0);
    let n = spec.n as f64;
    let bn = spec.b_n;
    let rn = n.sqrt().recip();
    let corr = bracket
        + rn * (p1 + a * p2)
        + (p3 + a * p4) / bn
        + p5 / n
        + bn.powf(-1.5) * p6;
    let big_phi = std_normal().cdf(x);
    let phix = phi(x);
    if phix == 0.0 {
        big_phi
    } else {
        big_phi + corr * phix
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{adaptive_simpson, gauss_hermite};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn spec_with(betas: Betas, e: f64, a: f64) -> ExpansionSpec {
        ExpansionSpec::new(betas, e, a, 200, 25.0).unwrap()
    }

    #[test]
    fn hermite_examples() {
        assert_eq!(hermite_poly(2, 0.0).unwrap(), -1.0);
        assert_eq!(hermite_poly(3, 2.0).unwrap(), 2.0);
        assert_eq!(hermite_poly(4, 1.0).unwrap(), -2.0);
        assert!(matches!(hermite_poly(7, 0.0), Err(Error::Domain(_))));
    }

    /// `(-1)^k φ^(k)(x)/φ(x)` equals the k-th derivative at t = 0 of
    /// `g(t) = exp(x t - t²/2)`; differentiated numerically with the
    /// Lyness–Moler contour stencil (trapezoidal Cauchy integral on |t| = 1).
    fn contour_derivative(x: f64, k: usize) -> f64 {
        let m = 64;
        let mut acc = 0.0;
        for j in 0..m {
            let th = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            let re = x * th.cos() - 0.5 * (2.0 * th).cos();
            let im = x * th.sin() - 0.5 * (2.0 * th).sin();
            acc += re.exp() * (im - k as f64 * th).cos();
        }
        let fact: f64 = (1..=k).map(|i| i as f64).product();
        fact * acc / m as f64
    }

    #[test]
    fn hermite_matches_derivative_definition() {
        for k in 0..=6usize {
            for i in 0..=60 {
                let x = -3.0 + 0.1 * i as f64;
                let d = contour_derivative(x, k);
                let hk = hermite_poly(k, x).unwrap();
                assert!((d - hk).abs() <= 1e-6, "k={k} x={x} {d} {hk}");
            }
        }
    }

    #[test]
    fn hermite_orthogonality() {
        let (x, w) = gauss_hermite(64).unwrap();
        let fact = [1.0, 1.0, 2.0, 6.0, 24.0, 120.0, 720.0];
        for j in 0..=6 {
            for k in 0..=6 {
                let v: f64 = x.iter().zip(&w).map(|(x, w)| w * hermite(j, *x) * hermite(k, *x)).sum();
                let target = if j == k { fact[j] } else { 0.0 };
                assert!((v - target).abs() < 1e-8, "j={j} k={k} {v}");
            }
        }
    }

    #[test]
    fn cumulant_examples() {
        let k = k_statistics(&[0.0, 0.0, 3.0]).unwrap();
        assert_abs_diff_eq!(k[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(k[1], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(k[2], 9.0, epsilon = 1e-13);
        assert_eq!(k.len(), 3);
        let k = k_statistics(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(k[2], 0.0, epsilon = 1e-14);
        assert!(matches!(k_statistics(&[2.0; 6]), Err(Error::Degenerate(_))));
        assert!(matches!(sample_cumulants(&[2.0; 6]), Err(Error::Degenerate(_))));
        assert!(sample_cumulants(&[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn k4_matches_central_moment_formula() {
        let xs = [0.3, -1.2, 2.5, 0.7, 0.1, -0.4, 1.9];
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
        let k4 = n * n * ((n + 1.0) * m4 - 3.0 * (n - 1.0) * m2 * m2) / ((n - 1.0) * (n - 2.0) * (n - 3.0));
        let k = k_statistics(&xs).unwrap();
        assert_abs_diff_eq!(k[3], k4, epsilon = 1e-12);
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let xs = [0.3, -1.2, 2.5, 0.7, 0.1, -0.4, 1.9, 5.0];
        let c = sample_cumulants(&xs).unwrap();
        let loo: Vec<Vec<f64>> = (0..xs.len())
            .map(|i| {
                let rest: Vec<f64> = xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
                k_statistics(&rest).unwrap()
            })
            .collect();
        let r = xs.len() as f64;
        for p in 0..4 {
            let mean = loo.iter().map(|k| k[p]).sum::<f64>() / r;
            let se = ((r - 1.0) / r * loo.iter().map(|k| (k[p] - mean).powi(2)).sum::<f64>()).sqrt();
            assert!((c.std_errors()[p] - se).abs() <= 1e-9 * (1.0 + se), "order {}", p + 1);
        }
    }

    #[test]
    fn cumulants_of_normal_sample() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..200_000).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal) + 1.0).collect();
        let c = sample_cumulants(&xs).unwrap();
        for (k, (target, se)) in c.values().iter().zip([1.0, 4.0, 0.0, 0.0].iter().zip(c.std_errors())) {
            assert!((k - target).abs() < 4.0 * se, "{k} vs {target} (se {se})");
        }
    }

    fn grid_from(betas: &Betas, pts: &[(u64, usize)], e_sq: f64) -> Vec<GridPoint> {
        pts.iter()
            .map(|&(n, ell)| {
                let k = betas.implied_cumulants(n as f64, n as f64 / ell as f64, e_sq);
                GridPoint {
                    n,
                    ell,
                    cumulants: CumulantSet {
                        k1: k[0],
                        k2: k[1],
                        k3: k[2],
                        k4: k[3],
                        se1: 0.01,
                        se2: 0.02,
                        se3: 0.05,
                        se4: 0.1,
                        r: 1000,
                    },
                    e_n_sq: e_sq,
                }
            })
            .collect()
    }

    const GRID: [(u64, usize); 3] = [(200, 8), (400, 8), (400, 16)];

    #[test]
    fn exact_beta_recovery() {
        let truth = Betas::from_array([0.7, -1.3, 2.0, 0.4, -0.9, 1.5, -0.2, 1.1]);
        let fit = fit_betas(&grid_from(&truth, &GRID, 1.3)).unwrap();
        for (a, b) in fit.betas.to_array().iter().zip(truth.to_array()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        let zero = fit_betas(&grid_from(&Betas::default(), &GRID, 1.3)).unwrap();
        assert!(zero.betas.to_array().iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn fit_rejects_bad_grids() {
        let b = Betas::default();
        assert!(matches!(fit_betas(&grid_from(&b, &GRID[..2], 1.0)), Err(Error::Config(_))));
        assert!(matches!(
            fit_betas(&grid_from(&b, &[(100, 4), (200, 4), (400, 4)], 1.0)),
            Err(Error::RankDeficient { order: 2 })
        ));
        assert!(fit_betas(&grid_from(&b, &[(100, 4), (100, 4), (400, 4)], 1.0)).is_err());
    }

    /// Noisy recovery: the WLS estimate must lie within 4 standard errors of
    /// the truth, and agree with a direct normal-equations solve.
    #[test]
    fn noisy_beta_recovery() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let pts = [(200u64, 8usize), (400, 8), (400, 16), (800, 10), (300, 6)];
        let mut misses = 0;
        for _ in 0..1000 {
            let truth = Betas::from_array(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
            let mut grid = grid_from(&truth, &pts, 1.2);
            for g in &mut grid {
                let c = &mut g.cumulants;
                c.k1 += c.se1 * rng.sample::<f64, _>(StandardNormal);
                c.k2 += c.se2 * rng.sample::<f64, _>(StandardNormal);
                c.k3 += c.se3 * rng.sample::<f64, _>(StandardNormal);
                c.k4 += c.se4 * rng.sample::<f64, _>(StandardNormal);
            }
            let fit = fit_betas(&grid).unwrap();
            let oracle = normal_equations_oracle(&grid);
            for (i, ((b, se), t)) in fit
                .betas
                .to_array()
                .iter()
                .zip(fit.std_errors.to_array())
                .zip(truth.to_array())
                .enumerate()
            {
                assert!((b - oracle[i]).abs() <= 1e-6 * (1.0 + b.abs()));
                if (b - t).abs() > 4.0 * se {
                    misses += 1;
                }
            }
        }
        // Eight coefficients × 1000 trials at 4 sd: expect well under one miss.
        assert!(misses <= 2, "{misses} coefficients outside 4 standard errors");
    }

    fn normal_equations_oracle(grid: &[GridPoint]) -> [f64; 8] {
        let solve = |rows: Vec<Vec<f64>>, y: Vec<f64>, w: Vec<f64>| -> Vec<f64> {
            let p = rows[0].len();
            let mut xtx = DMatrix::<f64>::zeros(p, p);
            let mut xty = DVector::<f64>::zeros(p);
            for ((r, yi), wi) in rows.iter().zip(&y).zip(&w) {
                for a in 0..p {
                    xty[a] += wi * r[a] * yi;
                    for b in 0..p {
                        xtx[(a, b)] += wi * r[a] * r[b];
                    }
                }
            }
            xtx.lu().solve(&xty).unwrap().iter().copied().collect()
        };
        let nb = |g: &GridPoint| (g.n as f64, g.n as f64 / g.ell as f64);
        let c1 = solve(
            grid.iter().map(|g| vec![nb(g).0.powf(-0.5)]).collect(),
            grid.iter().map(|g| g.cumulants.k1).collect(),
            grid.iter().map(|g| g.cumulants.se1.powi(-2)).collect(),
        );
        let c2 = solve(
            grid.iter().map(|g| vec![1.0 / nb(g).1, 1.0 / nb(g).0]).collect(),
            grid.iter().map(|g| g.cumulants.k2 - g.e_n_sq).collect(),
            grid.iter().map(|g| g.cumulants.se2.powi(-2)).collect(),
        );
        let c3 = solve(
            grid.iter().map(|g| vec![nb(g).0.powf(-0.5), nb(g).1.powf(-1.5)]).collect(),
            grid.iter().map(|g| g.cumulants.k3).collect(),
            grid.iter().map(|g| g.cumulants.se3.powi(-2)).collect(),
        );
        let c4 = solve(
            grid.iter().map(|g| vec![1.0 / nb(g).1, 1.0 / nb(g).0, nb(g).1.powf(-1.5)]).collect(),
            grid.iter().map(|g| g.cumulants.k4).collect(),
            grid.iter().map(|g| g.cumulants.se4.powi(-2)).collect(),
        );
        [c1[0], c2[0], c2[1], c3[0], c3[1], c4[0], c4[1], c4[2]]
    }

    #[test]
    fn density_examples() {
        let zero = spec_with(Betas::default(), 1.0, 0.0);
        for x in [-2.0, 0.0, 0.7] {
            assert_abs_diff_eq!(preliminary_density(x, &zero), phi(x), epsilon = 1e-15);
            assert_abs_diff_eq!(expansion_cdf(x, &zero), std_normal().cdf(x), epsilon = 1e-15);
        }
        // H3(0) = 0 removes the n^{-1/2} term; the 1/n term keeps
        // β31² H6(0) / 72 with H6(0) = -15.
        let b31 = spec_with(Betas { beta_31: 6.0, ..Default::default() }, 1.0, 0.0);
        let expect = phi(0.0) * (1.0 + 36.0 * -15.0 / 72.0 / 200.0);
        assert_abs_diff_eq!(preliminary_density(0.0, &b31), expect, epsilon = 1e-15);
        let b11 = spec_with(Betas { beta_11: 1.0, ..Default::default() }, 1.0, 0.0);
        for x in [-1.5, 0.3, 2.0] {
            let expect = phi(x) * (1.0 + x / 200f64.sqrt() + x * x / 2.0 / 200.0 - 0.5 / 200.0);
            // q3 carries the β11² H2/2 term at order 1/n.
            assert_abs_diff_eq!(preliminary_density(x, &b11), expect, epsilon = 1e-14);
        }
        let beta = 0.8;
        let s = spec_with(Betas { beta_11: beta, ..Default::default() }, 1.0, 0.0);
        for x in [-1.0, 0.5] {
            let expect = std_normal().cdf(x) - beta / 200f64.sqrt() * phi(x)
                - beta * beta / 2.0 * x / 200.0 * phi(x);
            assert_abs_diff_eq!(expansion_cdf(x, &s), expect, epsilon = 1e-14);
        }
    }

    fn random_spec(rng: &mut ChaCha12Rng, e_range: (f64, f64), a_zero: bool) -> ExpansionSpec {
        let betas = Betas::from_array(std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
        let e = rng.random_range(e_range.0..=e_range.1);
        let a = if a_zero { 0.0 } else { rng.random_range(-0.2..0.2) };
        let n = rng.random_range(100..2000u64);
        let ell = rng.random_range(2..20usize);
        ExpansionSpec::new(betas, e, a, n, n as f64 / ell as f64).unwrap()
    }

    #[test]
    fn density_integrates_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = random_spec(&mut rng, (0.8, 1.2), false);
            let e = s.e_n;
            let total = adaptive_simpson(|x| preliminary_density(x, &s), -12.0 * e, 12.0 * e, 1e-10).unwrap();
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    }

    #[test]
    fn cdf_derivative_matches_density() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s = random_spec(&mut rng, (1.0, 1.0 + f64::EPSILON), true);
            let s = ExpansionSpec { e_n: 1.0, ..s };
            for i in 0..=80 {
                let x = -4.0 + 0.1 * i as f64;
                let h = 1e-4;
                let d = (expansion_cdf(x + h, &s) - expansion_cdf(x - h, &s)) / (2.0 * h);
                assert!((d - preliminary_density(x, &s)).abs() < 1e-5, "x={x}");
            }
        }
    }

    #[test]
    fn tails() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..200 {
            let s = random_spec(&mut rng, (0.8, 1.2), false);
            let lo = expansion_cdf(-10.0, &s);
            let hi = expansion_cdf(10.0, &s);
            assert!((-1e-6..=1e-3).contains(&lo), "{lo}");
            assert!((1.0 - 1e-3..=1.0 + 1e-6).contains(&hi), "{hi}");
            assert_eq!(expansion_cdf(-60.0, &s), 0.0);
            assert_eq!(expansion_cdf(60.0, &s), 1.0);
        }
    }

    #[test]
    fn spec_round_trips_as_flat_record() {
        let s = ExpansionSpec::from_block(Betas::from_array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]), 1.1, 200, 8).unwrap();
        let json = serde_json::to_value(s).unwrap();
        let obj = json.as_object().unwrap();
        assert_eq!(obj.len(), 12);
        assert_eq!(obj["beta_43"], 8.0);
        assert_eq!(obj["b_n"], 25.0);
        let back: ExpansionSpec = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
        assert!(ExpansionSpec::new(Betas::default(), 0.0, 0.0, 10, 2.0).is_err());
    }
}
