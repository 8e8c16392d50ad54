//! Studentizing factors: lag-window and block-resampling estimators of the
//! long-run variance, and the block-variable algebra that splits the
//! lag-window matrix into stochastic orders.
//!
//! Every reduction over observations runs sequentially in index order, so
//! results are bit-reproducible regardless of how callers parallelize
//! across replicates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{analytic_autocov, lag_product_sum, MeanMode, Scaling};
use crate::error::{Error, Result};
use crate::series::Series;
use crate::simulate::LinearProcessSpec;
use crate::studentize::{ModelKind, SmoothModel};
use crate::tapers::{WeightScheme, WeightSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrvMethod {
    LagWindow,
    LagWindowRescaled,
    BlockResampling,
    KnownMeanBlock,
}

/// Which studentized statistic / studentizing factor to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Univariate mean with the unweighted truncated sum of `gamma_hat(k)`.
    DepMean,
    /// Lag-window factor with `1/n` lag covariances.
    V0,
    /// Lag-window factor with `1/(n-k)` lag covariances.
    V1,
    /// Block-resampling factor, estimated mean.
    V2,
    /// Block-resampling factor, known mean, `n/N` multiplier.
    V3,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dep_mean" | "dep-mean" | "dep" => Ok(Variant::DepMean),
            "v0" => Ok(Variant::V0),
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// A squared studentizing factor together with its unfloored value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrvEstimate {
    pub value: f64,
    pub raw: f64,
    pub floored: bool,
    pub method: LrvMethod,
    pub ell: usize,
}

impl LrvEstimate {
    /// Applies the `max(raw, 1/n)` floor. A tie is not reported as floored.
    pub fn from_raw(raw: f64, n: usize, method: LrvMethod, ell: usize) -> Self {
        let floor = 1.0 / n as f64;
        let floored = raw < floor;
        Self {
            value: if floored { floor } else { raw },
            raw,
            floored,
            method,
            ell,
        }
    }
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

fn check_direction(direction: &DVector<f64>, d: usize) -> Result<()> {
    if direction.len() != d {
        return Err(Error::Dimension(format!(
            "direction has length {}, series has dimension {d}",
            direction.len()
        )));
    }
    if direction.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateGradient);
    }
    if direction.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("direction".into()));
    }
    Ok(())
}

/// `Gamma_hat(0) + sum_{k=1}^{ell} w_k (Gamma_hat(k) + Gamma_hat(k)')`.
pub fn lag_window_matrix(
    series: &Series,
    scheme: &WeightScheme,
    scaling: Scaling,
    mean: &MeanMode,
) -> Result<DMatrix<f64>> {
    let n = series.len();
    let ell = scheme.ell();
    if ell >= n {
        return Err(Error::Lag { lag: ell, n });
    }
    let center = mean.center(series)?;
    let centered = series.centered(&center)?;
    let d = series.dim();
    let mut sigma = lag_product_sum(centered.as_slice(), d, 0) / n as f64;
    for k in 1..=ell {
        let w = scheme.weight(k);
        let s = match scaling {
            Scaling::N => n,
            Scaling::NMinusK => n - k,
        } as f64;
        let g = lag_product_sum(centered.as_slice(), d, k) / s;
        sigma += (&g + g.transpose()) * w;
    }
    Ok(sigma)
}

/// Lag-window estimate of `direction' Sigma direction`, floored at `1/n`.
pub fn lag_window_lrv(
    series: &Series,
    scheme: &WeightScheme,
    direction: &DVector<f64>,
    scaling: Scaling,
    mean: &MeanMode,
) -> Result<LrvEstimate> {
    check_direction(direction, series.dim())?;
    let sigma = lag_window_matrix(series, scheme, scaling, mean)?;
    let method = match scaling {
        Scaling::N => LrvMethod::LagWindow,
        Scaling::NMinusK => LrvMethod::LagWindowRescaled,
    };
    Ok(LrvEstimate::from_raw(quad_form(&sigma, direction), series.len(), method, scheme.ell()))
}

/// Overlapping-block estimator `N^{-1} sum_i V_i V_i'` with
/// `V_i = sum_{m=1}^{ell} w_m (X_{i+m-1} - center)`, `N = n - ell + 1`.
///
/// Weights are indexed by position within the block.
pub fn block_resampling_cov(series: &Series, scheme: &WeightScheme, mean: &MeanMode) -> Result<DMatrix<f64>> {
    let n = series.len();
    let ell = scheme.ell();
    if ell > n {
        return Err(Error::Lag { lag: ell, n });
    }
    if matches!(scheme.source(), WeightSource::Explicit) && (scheme.sum_of_squares() - 1.0).abs() > 1e-8 {
        log::warn!(
            "block weights have squared sum {} rather than 1",
            scheme.sum_of_squares()
        );
    }
    let center = mean.center(series)?;
    let c = series.centered(&center)?;
    let x = c.as_slice();
    let d = series.dim();
    let big_n = n - ell + 1;
    let w = scheme.weights();
    let mut acc = DMatrix::zeros(d, d);
    let mut v = vec![0.0; d];
    for i in 0..big_n {
        v.iter_mut().for_each(|e| *e = 0.0);
        for (m, wm) in w.iter().enumerate() {
            let row = &x[(i + m) * d..(i + m + 1) * d];
            for p in 0..d {
                v[p] += wm * row[p];
            }
        }
        for p in 0..d {
            for q in 0..d {
                acc[(p, q)] += v[p] * v[q];
            }
        }
    }
    Ok(acc / big_n as f64)
}

/// Squared studentizing factor of the requested variant, with direction
/// `h(Xbar_n)`.
///
/// `DepMean` needs a univariate identity model and uses
/// `gamma_hat(k) = n^{-1} sum Z_i Z_{i+k} - Zbar^2` with unit weights up to
/// the scheme's `ell` (the scheme's weight values are ignored).
pub fn studentizing_factor(
    series: &Series,
    model: &SmoothModel,
    scheme: &WeightScheme,
    variant: Variant,
) -> Result<LrvEstimate> {
    if model.dim() != series.dim() {
        return Err(Error::Dimension(format!(
            "model dimension {} differs from series dimension {}",
            model.dim(),
            series.dim()
        )));
    }
    let n = series.len();
    let ell = scheme.ell();
    if variant == Variant::DepMean {
        return dep_mean_factor(series, model, ell);
    }
    let xbar = series.mean();
    let h = DVector::from_vec(model.gradient(xbar.as_slice()));
    check_direction(&h, series.dim())?;
    match variant {
        Variant::V0 => lag_window_lrv(series, scheme, &h, Scaling::N, &MeanMode::Estimated),
        Variant::V1 => lag_window_lrv(series, scheme, &h, Scaling::NMinusK, &MeanMode::Estimated),
        Variant::V2 => {
            if ell >= n {
                return Err(Error::Lag { lag: ell, n });
            }
            let s = block_resampling_cov(series, scheme, &MeanMode::Estimated)?;
            Ok(LrvEstimate::from_raw(quad_form(&s, &h), n, LrvMethod::BlockResampling, ell))
        }
        Variant::V3 => {
            if ell >= n {
                return Err(Error::Lag { lag: ell, n });
            }
            let mu = model
                .mu()
                .ok_or_else(|| Error::Config("known-mean variant needs the model mean".into()))?;
            let s = block_resampling_cov(series, scheme, &MeanMode::Known(mu.to_vec()))?;
            let mult = n as f64 / (n - ell + 1) as f64;
            let raw = mult * mult * quad_form(&s, &h);
            Ok(LrvEstimate::from_raw(raw, n, LrvMethod::KnownMeanBlock, ell))
        }
        Variant::DepMean => unreachable!(),
    }
}

fn dep_mean_factor(series: &Series, model: &SmoothModel, ell: usize) -> Result<LrvEstimate> {
    if series.dim() != 1 || model.kind() != ModelKind::Identity {
        return Err(Error::Config(
            "dep_mean variant requires a univariate series and the identity model".into(),
        ));
    }
    let n = series.len();
    if ell >= n {
        return Err(Error::Lag { lag: ell, n });
    }
    let z = series.as_slice();
    let nf = n as f64;
    let zbar = z.iter().sum::<f64>() / nf;
    let gamma = |k: usize| -> f64 {
        let s: f64 = z[..n - k].iter().zip(&z[k..]).map(|(a, b)| a * b).sum();
        s / nf - zbar * zbar
    };
    let mut raw = gamma(0);
    for k in 1..=ell {
        raw += 2.0 * gamma(k);
    }
    Ok(LrvEstimate::from_raw(raw, n, LrvMethod::LagWindow, ell))
}

/// Lexicographic `(p, q)`, `p <= q`, index pairs for dimension `d`.
pub fn upper_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|p| (p..d).map(move |q| (p, q))).collect()
}

/// Symmetric matrix with the `(p, q)` and `(q, p)` entries both set from a
/// lexicographic upper-triangle vector.
pub fn unvec_symmetric(v: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for (idx, (p, q)) in upper_pairs(d).into_iter().enumerate() {
        m[(p, q)] = v[idx];
        m[(q, p)] = v[idx];
    }
    m
}

/// Per-observation and per-block variables of the lag-window estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVariables {
    /// `W_j`, `j = 1..ceil(n/ell)`, each of length `d + d(d+1)/2`.
    pub w_blocks: Vec<Vec<f64>>,
    /// `Y_i^#`, `i = 1..n`, each of length `d(d+1)/2`.
    pub y_sharp: Vec<Vec<f64>>,
    /// Weighted sums over the first and the last `ell` observations.
    pub boundary: (Vec<f64>, Vec<f64>),
    /// `n^{1/2} SVEC(Xbar [boundary.0 + boundary.1]')`.
    pub xi: Vec<f64>,
}

/// `E Y_i^#` for 0-based `i` under the process spec (centered at its mean).
fn expected_y_sharp(gammas: &[DMatrix<f64>], scheme: &WeightScheme, n: usize, i: usize) -> Vec<f64> {
    let d = gammas[0].nrows();
    let kmax = scheme.ell().min(n - 1 - i);
    upper_pairs(d)
        .into_iter()
        .map(|(p, q)| {
            let mut s = gammas[0][(p, q)];
            for k in 1..=kmax {
                s += scheme.weight(k) * (gammas[k][(p, q)] + gammas[k][(q, p)]);
            }
            s
        })
        .collect()
}

/// Builds [`BlockVariables`] from `X_i - mu`.
///
/// With `centering = Some(spec)` the `Y` part of each block uses
/// `Y_i^# - E Y_i^#` computed from the spec's autocovariances; with `None`
/// the raw `Y_i^#` are summed.
pub fn block_variables(
    series: &Series,
    scheme: &WeightScheme,
    mu: &[f64],
    centering: Option<&LinearProcessSpec>,
) -> Result<BlockVariables> {
    let n = series.len();
    let ell = scheme.ell();
    let d = series.dim();
    if ell >= n {
        return Err(Error::Lag { lag: ell, n });
    }
    let c = series.centered(mu)?;
    let x = c.as_slice();
    let pairs = upper_pairs(d);
    let row = |i: usize| &x[i * d..(i + 1) * d];

    let y_sharp: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let xi = row(i);
            pairs
                .iter()
                .map(|&(p, q)| {
                    let mut s = xi[p] * xi[q];
                    for k in 1..=ell.min(n - 1 - i) {
                        let xk = row(i + k);
                        s += scheme.weight(k) * (xi[p] * xk[q] + xk[p] * xi[q]);
                    }
                    s
                })
                .collect()
        })
        .collect();

    let gammas: Option<Vec<DMatrix<f64>>> =
        centering.map(|spec| (0..=ell as i64).map(|k| analytic_autocov(spec, k)).collect());
    if let Some(g) = &gammas {
        if g[0].nrows() != d {
            return Err(Error::Dimension("process and series dimensions differ".into()));
        }
    }

    let ellf = ell as f64;
    let b0 = n.div_ceil(ell);
    let w_blocks = (0..b0)
        .map(|j| {
            let start = j * ell;
            let end = ((j + 1) * ell).min(n);
            let mut sx = vec![0.0; d];
            let mut sy = vec![0.0; pairs.len()];
            for i in start..end {
                for (acc, v) in sx.iter_mut().zip(row(i)) {
                    *acc += v;
                }
                let ey = gammas.as_ref().map(|g| expected_y_sharp(g, scheme, n, i));
                for (idx, acc) in sy.iter_mut().enumerate() {
                    *acc += y_sharp[i][idx] - ey.as_ref().map_or(0.0, |e| e[idx]);
                }
            }
            sx.iter()
                .map(|v| v / ellf.sqrt())
                .chain(sy.iter().map(|v| v / ellf))
                .collect()
        })
        .collect();

    // Cumulative tail weights sum_{k=i}^{ell} w_k.
    let mut tail = vec![0.0; ell + 2];
    for i in (1..=ell).rev() {
        tail[i] = tail[i + 1] + scheme.weight(i);
    }
    let scale = ellf.powf(-1.5);
    let mut first = vec![0.0; d];
    let mut last = vec![0.0; d];
    for i in 1..=ell {
        let (a, b) = (row(i - 1), row(n - i));
        for p in 0..d {
            first[p] += tail[i] * a[p];
            last[p] += tail[i] * b[p];
        }
    }
    first.iter_mut().for_each(|v| *v *= scale);
    last.iter_mut().for_each(|v| *v *= scale);

    let xbar = c.mean();
    let sqrt_n = (n as f64).sqrt();
    let edge: Vec<f64> = first.iter().zip(&last).map(|(a, b)| a + b).collect();
    let xi = pairs
        .iter()
        .map(|&(p, q)| sqrt_n * (xbar[p] * edge[q] + edge[p] * xbar[q]))
        .collect();

    Ok(BlockVariables {
        w_blocks,
        y_sharp,
        boundary: (first, last),
        xi,
    })
}

/// Orders-of-magnitude split of the lag-window matrix around its
/// expectation-level target.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaDecomposition {
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub a3: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub sigma1n: DMatrix<f64>,
    pub residual: f64,
}

impl SigmaDecomposition {
    /// `b^{-1/2} a1 + b^{-1} a2 + b^{-3/2} a3` with `b = n / ell`.
    pub fn reconstruct(&self, n: usize, ell: usize) -> DMatrix<f64> {
        let b = n as f64 / ell as f64;
        &self.a1 / b.sqrt() + &self.a2 / b + &self.a3 / b.powf(1.5)
    }
}

/// Splits `Sigma_hat - Sigma_1n` into
/// `b^{-1/2} A_1 + b^{-1} A_2 + b^{-3/2} A_3`.
///
/// `A_1` is the centered sum of `Y_i^#`, `A_2` collects the quadratic
/// sample-mean terms and `A_3` the boundary-block interaction `xi`.
/// `Sigma_1n = E n^{-1} sum Y_i^#` honours the truncation of lags past `n`.
pub fn sigma_decomposition(
    series: &Series,
    spec: &LinearProcessSpec,
    scheme: &WeightScheme,
) -> Result<SigmaDecomposition> {
    let n = series.len();
    let ell = scheme.ell();
    let d = series.dim();
    if spec.dim() != d {
        return Err(Error::Dimension("process and series dimensions differ".into()));
    }
    let mu = spec.mu().as_slice().to_vec();
    let bv = block_variables(series, scheme, &mu, None)?;
    let sigma_hat = lag_window_matrix(series, scheme, Scaling::N, &MeanMode::Estimated)?;

    let nf = n as f64;
    let ellf = ell as f64;
    let mut sigma1n = analytic_autocov(spec, 0);
    for k in 1..=ell {
        let g = analytic_autocov(spec, k as i64);
        sigma1n += (&g + g.transpose()) * (scheme.weight(k) * (nf - k as f64) / nf);
    }

    let pairs = upper_pairs(d);
    let mut ysum = vec![0.0; pairs.len()];
    for y in &bv.y_sharp {
        for (acc, v) in ysum.iter_mut().zip(y) {
            *acc += v;
        }
    }
    let a1_vec: Vec<f64> = pairs
        .iter()
        .enumerate()
        .map(|(idx, &(p, q))| (ysum[idx] - nf * sigma1n[(p, q)]) / (nf * ellf).sqrt())
        .collect();
    let a1 = unvec_symmetric(&a1_vec, d);

    let xbar = series.centered(&mu)?.mean();
    let z = xbar * nf.sqrt();
    let mut coef = 1.0;
    for k in 1..=ell {
        coef += 2.0 * (1.0 + k as f64 / nf) * scheme.weight(k);
    }
    let a2 = &z * z.transpose() * (-coef / ellf);
    let a3 = unvec_symmetric(&bv.xi, d);

    let mut out = SigmaDecomposition {
        a1,
        a2,
        a3,
        sigma_hat,
        sigma1n,
        residual: 0.0,
    };
    let diff = &out.sigma_hat - &out.sigma1n - out.reconstruct(n, ell);
    out.residual = diff.amax();
    Ok(out)
}
