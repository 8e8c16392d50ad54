//! Sample autocovariances and the exact second-order quantities of a linear
//! process: `Gamma(k)`, the long-run variance, and the finite-`n` variance
//! targets that drive the expansion scales `e_n` and `a_n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Series;
use crate::simulate::LinearProcessSpec;
use crate::studentize::SmoothModel;
use crate::tapers::WeightScheme;

/// Divisor of a lag-`k` sample autocovariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `1/n` at every lag.
    N,
    /// `1/(n - k)` at lag `k`.
    NMinusK,
}

/// Centering used by sample moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    Estimated,
    Known(Vec<f64>),
}

impl MeanMode {
    pub(crate) fn center(&self, series: &Series) -> Result<Vec<f64>> {
        match self {
            MeanMode::Estimated => Ok(series.mean().as_slice().to_vec()),
            MeanMode::Known(mu) => {
                if mu.len() != series.dim() {
                    return Err(Error::Dimension(format!(
                        "known mean has length {}, series has dimension {}",
                        mu.len(),
                        series.dim()
                    )));
                }
                Ok(mu.clone())
            }
        }
    }
}

/// Unscaled lag-`k` cross-product sum `sum_i x_i x_{i+k}'` of already
/// centered, row-major data.
pub(crate) fn lag_product_sum(centered: &[f64], d: usize, k: usize) -> DMatrix<f64> {
    let n = centered.len() / d;
    let mut out = DMatrix::zeros(d, d);
    if k >= n {
        return out;
    }
    if d == 1 {
        let s: f64 = centered[..n - k]
            .iter()
            .zip(&centered[k..])
            .map(|(a, b)| a * b)
            .sum();
        out[(0, 0)] = s;
        return out;
    }
    for i in 0..n - k {
        let a = &centered[i * d..(i + 1) * d];
        let b = &centered[(i + k) * d..(i + k + 1) * d];
        for p in 0..d {
            for q in 0..d {
                out[(p, q)] += a[p] * b[q];
            }
        }
    }
    out
}

/// Lag-`k` sample autocovariance matrix
/// `(1/s) sum_{i=1}^{n-k} (X_i - m)(X_{i+k} - m)'`.
pub fn sample_autocov(series: &Series, k: usize, scaling: Scaling, mean: &MeanMode) -> Result<DMatrix<f64>> {
    let n = series.len();
    if k >= n {
        return Err(Error::Lag { lag: k, n });
    }
    let center = mean.center(series)?;
    let centered = series.centered(&center)?;
    let s = match scaling {
        Scaling::N => n,
        Scaling::NMinusK => n - k,
    } as f64;
    Ok(lag_product_sum(centered.as_slice(), series.dim(), k) / s)
}

/// `Gamma(k) = sum_j A_j V A_{j+k}'` for any integer `k`.
pub fn analytic_autocov(spec: &LinearProcessSpec, k: i64) -> DMatrix<f64> {
    let d = spec.dim();
    let v = spec.innovation_cov();
    let mut out = DMatrix::zeros(d, d);
    for (j, a) in spec.coeffs() {
        if let Some(b) = spec.coeff(j + k) {
            out += a * v * b.transpose();
        }
    }
    out
}

/// `h' Gamma(k) h` for `k = 0..=support_width`; zero beyond.
pub(crate) fn projected_autocov(spec: &LinearProcessSpec, h: &DVector<f64>) -> Vec<f64> {
    let v = spec.innovation_cov();
    let (lo, hi) = spec.support();
    // u_j = A_j' h, indexed from lo.
    let u: Vec<Option<DVector<f64>>> = (lo..=hi).map(|j| spec.coeff(j).map(|a| a.transpose() * h)).collect();
    let width = (hi - lo) as usize;
    (0..=width)
        .map(|k| {
            (0..=width - k)
                .filter_map(|i| match (&u[i], &u[i + k]) {
                    (Some(a), Some(b)) => Some((a.transpose() * v * b)[(0, 0)]),
                    _ => None,
                })
                .sum()
        })
        .collect()
}

/// Exact variance targets for a model direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTargets {
    /// Long-run variance `h' [sum_k Gamma(k)] h`.
    pub sigma_inf_sq: f64,
    /// Expectation-level lag-window target with the scheme's weights.
    pub tau1n_sq: f64,
    /// Exact `Var(n^{1/2} h' (Xbar_n - mu))`.
    pub taun_sq: f64,
    pub e_n: f64,
    pub a_n_inv: f64,
    pub b_n: f64,
}

/// Computes [`AnalyticTargets`] at `h = grad H(mu)`.
///
/// The coefficient support is finite, so the long-run sum is exact: every
/// `Gamma(k)` past the support width vanishes identically.
pub fn analytic_targets(
    spec: &LinearProcessSpec,
    model: &SmoothModel,
    n: usize,
    scheme: &WeightScheme,
) -> Result<AnalyticTargets> {
    if n < 2 {
        return Err(Error::Domain(format!("n must be at least 2, got {n}")));
    }
    if model.dim() != spec.dim() {
        return Err(Error::Dimension(format!(
            "model dimension {} differs from process dimension {}",
            model.dim(),
            spec.dim()
        )));
    }
    let h = DVector::from_vec(model.gradient(spec.mu().as_slice()));
    if h.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateGradient);
    }
    let g = projected_autocov(spec, &h);
    let gamma = |k: usize| g.get(k).copied().unwrap_or(0.0);

    let sigma_inf_sq = g[0] + 2.0 * g[1..].iter().sum::<f64>();

    let mut tau1n_sq = gamma(0);
    for k in 1..=scheme.ell() {
        tau1n_sq += scheme.weight(k) * 2.0 * gamma(k);
    }
    if !(tau1n_sq > 0.0) {
        return Err(Error::NonPositiveVariance(tau1n_sq));
    }

    let mut taun_sq = gamma(0);
    for k in 1..n.min(g.len().max(1)) {
        taun_sq += (1.0 - k as f64 / n as f64) * 2.0 * gamma(k);
    }
    if !(taun_sq > 0.0) {
        return Err(Error::NonPositiveVariance(taun_sq));
    }

    let e_n = (taun_sq / tau1n_sq).sqrt();
    Ok(AnalyticTargets {
        sigma_inf_sq,
        tau1n_sq,
        taun_sq,
        e_n,
        a_n_inv: 1.0 / e_n - 1.0,
        b_n: n as f64 / scheme.ell() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_linear_process, make_ar1_spec, make_ma_spec, make_var1_spec, Innovation, SeedSpec};
    use crate::tapers::{make_weights, Taper};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn alt() -> Series {
        Series::univariate(vec![1.0, -1.0, 1.0, -1.0]).unwrap()
    }

    #[test]
    fn sample_autocov_examples() {
        let z = alt();
        let g = sample_autocov(&z, 1, Scaling::N, &MeanMode::Estimated).unwrap();
        assert_eq!(g[(0, 0)], -0.75);
        let g = sample_autocov(&z, 1, Scaling::NMinusK, &MeanMode::Estimated).unwrap();
        assert_eq!(g[(0, 0)], -1.0);
        let c = Series::univariate(vec![2.5; 9]).unwrap();
        for k in 0..9 {
            assert_eq!(sample_autocov(&c, k, Scaling::N, &MeanMode::Estimated).unwrap()[(0, 0)], 0.0);
        }
        assert!(matches!(
            sample_autocov(&z, 4, Scaling::N, &MeanMode::Estimated),
            Err(Error::Lag { lag: 4, n: 4 })
        ));
        assert!(sample_autocov(&z, 0, Scaling::N, &MeanMode::Known(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn analytic_ar1_and_ma1() {
        let ar = make_ar1_spec(0.5, 1.0, 1e-12).unwrap();
        assert_relative_eq!(analytic_autocov(&ar, 0)[(0, 0)], 4.0 / 3.0, max_relative = 1e-11);
        assert_relative_eq!(analytic_autocov(&ar, 1)[(0, 0)], 2.0 / 3.0, max_relative = 1e-11);
        let ma = make_ma_spec(&[0.7], Innovation::standard_gaussian(1)).unwrap();
        assert_eq!(analytic_autocov(&ma, 2)[(0, 0)], 0.0);
        assert_relative_eq!(analytic_autocov(&ma, 1)[(0, 0)], 0.7);
        assert_relative_eq!(analytic_autocov(&ma, 0)[(0, 0)], 1.49);
    }

    #[test]
    fn analytic_autocov_transpose_symmetry() {
        let phi = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, -0.2, 0.1]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]);
        let spec = make_var1_spec(phi, Innovation::Gaussian { cov }, 1e-12).unwrap();
        for k in 0..6 {
            let a = analytic_autocov(&spec, k);
            let b = analytic_autocov(&spec, -k);
            assert!((a.transpose() - b).amax() <= 1e-14, "lag {k}");
        }
    }

    #[test]
    fn targets_for_ar1() {
        let spec = make_ar1_spec(0.5, 1.0, 1e-12).unwrap();
        let model = SmoothModel::identity();
        let scheme = make_weights(&Taper::Bartlett, 2).unwrap();
        let t = analytic_targets(&spec, &model, 1000, &scheme).unwrap();
        assert_relative_eq!(t.tau1n_sq, 2.0, max_relative = 1e-11);
        assert_relative_eq!(t.sigma_inf_sq, 4.0, max_relative = 1e-10);
        assert_eq!(t.b_n, 500.0);
        let t = analytic_targets(&spec, &model, 2, &scheme).unwrap();
        assert_relative_eq!(t.taun_sq, 2.0, max_relative = 1e-11);
        assert_relative_eq!(t.e_n, 1.0, max_relative = 1e-11);
        assert!(t.a_n_inv.abs() < 1e-11);
    }

    #[test]
    fn cesaro_weights_match_exact_variance() {
        let spec = make_ar1_spec(0.8, 1.3, 1e-12).unwrap();
        let model = SmoothModel::identity();
        for n in [2usize, 5, 17, 64, 300] {
            let scheme = make_weights(&Taper::Bartlett, n).unwrap();
            let t = analytic_targets(&spec, &model, n, &scheme).unwrap();
            assert_eq!(t.tau1n_sq, t.taun_sq, "n = {n}");
            assert_eq!(t.e_n, 1.0);
            assert_eq!(t.a_n_inv, 0.0);
        }
    }

    #[test]
    fn targets_reject_degenerate_and_nonpositive() {
        let spec = make_ar1_spec(0.5, 1.0, 1e-12).unwrap();
        let flat = SmoothModel::new("flat", 1, |_| 0.0, |_| vec![0.0]);
        let scheme = make_weights(&Taper::Bartlett, 2).unwrap();
        assert!(matches!(analytic_targets(&spec, &flat, 10, &scheme), Err(Error::DegenerateGradient)));
        let neg = WeightScheme::explicit(vec![-5.0]).unwrap();
        assert!(matches!(
            analytic_targets(&spec, &SmoothModel::identity(), 10, &neg),
            Err(Error::NonPositiveVariance(_))
        ));
    }

    #[test]
    fn known_mean_ma_lag_estimates_are_unbiased() {
        let spec = make_ma_spec(&[0.6, -0.3], Innovation::standard_gaussian(1)).unwrap();
        let n = 256;
        let reps = 10_000u64;
        for k in 0..=3usize {
            let vals: Vec<f64> = (0..reps)
                .map(|r| {
                    let x = gen_linear_process(&spec, n, SeedSpec::new(99, r)).unwrap();
                    sample_autocov(&x, k, Scaling::NMinusK, &MeanMode::Known(vec![0.0])).unwrap()[(0, 0)]
                })
                .collect();
            let m = vals.iter().sum::<f64>() / reps as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            let truth = analytic_autocov(&spec, k as i64)[(0, 0)];
            if k > 2 {
                assert_eq!(truth, 0.0);
            }
            assert!((m - truth).abs() < 3.0 * sd / (reps as f64).sqrt(), "lag {k}: {m} vs {truth}");
        }
    }

    proptest! {
        #[test]
        fn rescaled_lag_covariance(vals in proptest::collection::vec(-10f64..10.0, 3..60), frac in 0.0f64..1.0) {
            let z = Series::univariate(vals).unwrap();
            let n = z.len();
            let k = ((n - 1) as f64 * frac) as usize;
            let a = sample_autocov(&z, k, Scaling::NMinusK, &MeanMode::Estimated).unwrap()[(0, 0)];
            let b = sample_autocov(&z, k, Scaling::N, &MeanMode::Estimated).unwrap()[(0, 0)];
            let expected = b * n as f64 / (n - k) as f64;
            prop_assert!((a - expected).abs() <= 1e-14 * (1.0 + expected.abs()));
        }
    }
}
