//! Smooth function model `theta = H(mu)`, `theta_hat = H(Xbar_n)`, and the
//! studentized statistics built on it.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrv::{studentizing_factor, Variant};
use crate::series::Series;
use crate::tapers::WeightScheme;

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Identity,
    Projection,
    Ratio,
    Lag1Autocorrelation,
    Custom,
}

/// A scalar parameter `H(mu)` of the mean of a d-dimensional series,
/// together with its gradient.
#[derive(Clone)]
pub struct SmoothModel {
    name: String,
    kind: ModelKind,
    dim: usize,
    value: ValueFn,
    grad: GradFn,
    mu: Option<Vec<f64>>,
    theta: Option<f64>,
}

impl fmt::Debug for SmoothModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("mu", &self.mu)
            .field("theta", &self.theta)
            .finish()
    }
}

impl SmoothModel {
    /// Custom model from a value function and its gradient.
    pub fn new<F, G>(name: &str, dim: usize, value: F, grad: G) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.to_string(),
            kind: ModelKind::Custom,
            dim,
            value: Arc::new(value),
            grad: Arc::new(grad),
            mu: None,
            theta: None,
        }
    }

    fn builtin(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    /// `H(x) = x` on a univariate series.
    pub fn identity() -> Self {
        Self::new("identity", 1, |x| x[0], |_| vec![1.0]).builtin(ModelKind::Identity)
    }

    /// `H(x) = x_j`.
    pub fn projection(dim: usize, j: usize) -> Self {
        Self::new(
            &format!("projection:{j}"),
            dim,
            move |x| x[j],
            move |_| {
                let mut g = vec![0.0; dim];
                g[j] = 1.0;
                g
            },
        )
        .builtin(ModelKind::Projection)
    }

    /// `H(x) = x_i / x_j`.
    pub fn ratio(dim: usize, i: usize, j: usize) -> Self {
        Self::new(
            &format!("ratio:{i}/{j}"),
            dim,
            move |x| x[i] / x[j],
            move |x| {
                let mut g = vec![0.0; dim];
                g[i] += 1.0 / x[j];
                g[j] -= x[i] / (x[j] * x[j]);
                g
            },
        )
        .builtin(ModelKind::Ratio)
    }

    /// Lag-1 autocorrelation `(m3 - m1^2) / (m2 - m1^2)` on the mean of the
    /// augmented series `(Z_i, Z_i^2, Z_i Z_{i+1})`; see [`augment_lag1`].
    pub fn lag1_autocorrelation() -> Self {
        Self::new(
            "lag1_autocorrelation",
            3,
            |x| (x[2] - x[0] * x[0]) / (x[1] - x[0] * x[0]),
            |x| {
                let den = x[1] - x[0] * x[0];
                let num = x[2] - x[0] * x[0];
                vec![
                    (-2.0 * x[0] * den + 2.0 * x[0] * num) / (den * den),
                    -num / (den * den),
                    1.0 / den,
                ]
            },
        )
        .builtin(ModelKind::Lag1Autocorrelation)
    }

    /// Parses `identity`, `projection:<j>` or `ratio:<i>/<j>` (0-based
    /// coordinates) for a series of dimension `dim`.
    pub fn parse(spec: &str, dim: usize) -> Result<Self> {
        let spec = spec.trim();
        let bad = || Error::Config(format!("unknown model `{spec}`"));
        let idx = |s: &str| -> Result<usize> {
            let j = s.trim().parse::<usize>().map_err(|_| bad())?;
            if j >= dim {
                return Err(Error::Config(format!("coordinate {j} out of range for dimension {dim}")));
            }
            Ok(j)
        };
        if spec == "identity" {
            if dim != 1 {
                return Err(Error::Config("identity model needs a univariate series".into()));
            }
            return Ok(Self::identity());
        }
        if let Some(j) = spec.strip_prefix("projection:") {
            return Ok(Self::projection(dim, idx(j)?));
        }
        if let Some(rest) = spec.strip_prefix("ratio:") {
            let (i, j) = rest.split_once('/').ok_or_else(bad)?;
            return Ok(Self::ratio(dim, idx(i)?, idx(j)?));
        }
        Err(bad())
    }

    /// Records the true mean and sets `theta = H(mu)`.
    pub fn with_mu(mut self, mu: Vec<f64>) -> Result<Self> {
        if mu.len() != self.dim {
            return Err(Error::Dimension(format!(
                "mean has length {}, model expects {}",
                mu.len(),
                self.dim
            )));
        }
        let theta = (self.value)(&mu);
        if !theta.is_finite() {
            return Err(Error::NonFinite(format!("H(mu) for model {}", self.name)));
        }
        self.theta = Some(theta);
        self.mu = Some(mu);
        Ok(self)
    }

    /// Sets the true parameter directly (when `mu` is unknown or irrelevant).
    pub fn with_theta(mut self, theta: f64) -> Result<Self> {
        if let Some(mu) = &self.mu {
            let implied = (self.value)(mu);
            if (implied - theta).abs() > 1e-12 * (1.0 + theta.abs()) {
                return Err(Error::Config(format!(
                    "theta {theta} disagrees with H(mu) = {implied}"
                )));
            }
        }
        self.theta = Some(theta);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu(&self) -> Option<&[f64]> {
        self.mu.as_deref()
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.grad)(x)
    }
}

/// Builds `(Z_i, Z_i^2, Z_i Z_{i+1})`, `i = 1..n-1`, from a univariate series.
pub fn augment_lag1(series: &Series) -> Result<Series> {
    if series.dim() != 1 || series.len() < 2 {
        return Err(Error::Dimension("lag-1 augmentation needs a univariate series of length >= 2".into()));
    }
    let z = series.as_slice();
    let data = z
        .windows(2)
        .flat_map(|w| [w[0], w[0] * w[0], w[0] * w[1]])
        .collect();
    Series::new(data, 3)
}

/// Largest `|analytic - fd| / (1 + |analytic|)` over coordinates, with central
/// differences of step `1e-5 (1 + ||x||)`.
pub fn gradient_check(model: &SmoothModel, point: &[f64]) -> Result<f64> {
    if point.len() != model.dim() {
        return Err(Error::Dimension("point length differs from model dimension".into()));
    }
    let norm = point.iter().map(|v| v * v).sum::<f64>().sqrt();
    let step = 1e-5 * (1.0 + norm);
    let g = model.gradient(point);
    let mut worst = 0.0f64;
    let mut x = point.to_vec();
    for j in 0..point.len() {
        x[j] = point[j] + step;
        let up = model.value(&x);
        x[j] = point[j] - step;
        let down = model.value(&x);
        x[j] = point[j];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("model value near coordinate {j}")));
        }
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((g[j] - fd).abs() / (1.0 + g[j].abs()));
    }
    Ok(worst)
}

/// `t = sqrt(n) (theta_hat - theta) / tau_hat` with its ingredients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentizedValue {
    pub t: f64,
    pub theta_hat: f64,
    pub tau_hat: f64,
    pub variant: Variant,
    pub floored: bool,
}

pub fn studentized_statistic(
    series: &Series,
    model: &SmoothModel,
    scheme: &WeightScheme,
    variant: Variant,
) -> Result<StudentizedValue> {
    let theta = model
        .theta()
        .ok_or_else(|| Error::Config("studentized statistic needs the true parameter theta".into()))?;
    let est = studentizing_factor(series, model, scheme, variant)?;
    let xbar = series.mean();
    let theta_hat = model.value(xbar.as_slice());
    if !theta_hat.is_finite() {
        return Err(Error::NonFinite("theta_hat".into()));
    }
    let tau_hat = est.value.sqrt();
    Ok(StudentizedValue {
        t: (series.len() as f64).sqrt() * (theta_hat - theta) / tau_hat,
        theta_hat,
        tau_hat,
        variant,
        floored: est.floored,
    })
}
