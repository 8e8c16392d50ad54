//! Seeded generators for finite-support linear processes
//! `X_i = mu + sum_j A_j eps_{i-j}`.
//!
//! Autoregressions are realized as truncated moving-average filters, so every
//! generated path is exactly stationary (no burn-in). Random numbers come
//! from a ChaCha stream keyed by `(master_seed, stream_id)`; the position in
//! the stream is the counter, so a replicate's draws depend only on its
//! [`SeedSpec`] and never on scheduling.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Series;

/// Key of one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self { master_seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// One Gaussian component of a mixture innovation law.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Law of the i.i.d. innovations `eps_i`. Mixtures are recentred to mean zero.
#[derive(Debug, Clone, PartialEq)]
pub enum Innovation {
    Gaussian { cov: DMatrix<f64> },
    Mixture { weights: Vec<f64>, components: Vec<GaussianComponent> },
    /// Independent coordinates, each uniform on `[-scale, scale]`.
    UniformCube { scale: f64 },
}

impl Innovation {
    pub fn standard_gaussian(d: usize) -> Self {
        Innovation::Gaussian { cov: DMatrix::identity(d, d) }
    }
}

/// Declared geometric envelope `||A_j|| <= c * rho^|j|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayBound {
    pub c: f64,
    pub rho: f64,
}

#[derive(Debug, Clone)]
enum Sampler {
    Gaussian { chol: DMatrix<f64> },
    Mixture { cumulative: Vec<f64>, shifts: Vec<DVector<f64>>, chols: Vec<DMatrix<f64>> },
    UniformCube { scale: f64 },
}

/// Coefficients, mean and innovation law of a linear process.
#[derive(Debug, Clone)]
pub struct LinearProcessSpec {
    coeffs: BTreeMap<i64, DMatrix<f64>>,
    mu: DVector<f64>,
    innovation: Innovation,
    innovation_cov: DMatrix<f64>,
    sampler: Sampler,
    decay: Option<DecayBound>,
    d: usize,
}

fn cholesky(cov: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::Dimension(format!("{what} covariance is not square")));
    }
    if (cov - cov.transpose()).amax() > 1e-12 * (1.0 + cov.amax()) {
        return Err(Error::Config(format!("{what} covariance is not symmetric")));
    }
    cov.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Config(format!("{what} covariance is not positive definite")))
}

impl LinearProcessSpec {
    pub fn new(
        coeffs: BTreeMap<i64, DMatrix<f64>>,
        mu: DVector<f64>,
        innovation: Innovation,
    ) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(Error::Dimension("process dimension must be positive".into()));
        }
        if coeffs.is_empty() {
            return Err(Error::Config("process needs at least one coefficient".into()));
        }
        for (j, a) in &coeffs {
            if a.shape() != (d, d) {
                return Err(Error::Dimension(format!(
                    "coefficient at lag {j} has shape {:?}, expected ({d}, {d})",
                    a.shape()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("coefficient at lag {j}")));
            }
        }
        let (innovation_cov, sampler) = match &innovation {
            Innovation::Gaussian { cov } => {
                if cov.shape() != (d, d) {
                    return Err(Error::Dimension("innovation covariance shape".into()));
                }
                (cov.clone(), Sampler::Gaussian { chol: cholesky(cov, "innovation")? })
            }
            Innovation::Mixture { weights, components } => {
                if weights.len() != components.len() || weights.is_empty() {
                    return Err(Error::Config("mixture weights and components differ in length".into()));
                }
                if weights.iter().any(|&w| !(w > 0.0)) {
                    return Err(Error::Config("mixture weights must be positive".into()));
                }
                let total: f64 = weights.iter().sum();
                let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
                let mut mean = DVector::zeros(d);
                for (p, c) in probs.iter().zip(components) {
                    if c.mean.len() != d || c.cov.shape() != (d, d) {
                        return Err(Error::Dimension("mixture component shape".into()));
                    }
                    mean += &c.mean * *p;
                }
                let mut cov = DMatrix::zeros(d, d);
                let mut chols = Vec::with_capacity(components.len());
                let mut shifts = Vec::with_capacity(components.len());
                for (p, c) in probs.iter().zip(components) {
                    let shift = &c.mean - &mean;
                    cov += (&c.cov + &shift * shift.transpose()) * *p;
                    chols.push(cholesky(&c.cov, "mixture component")?);
                    shifts.push(shift);
                }
                cholesky(&cov, "innovation")?;
                let cumulative = probs
                    .iter()
                    .scan(0.0, |acc, p| {
                        *acc += p;
                        Some(*acc)
                    })
                    .collect();
                (cov, Sampler::Mixture { cumulative, shifts, chols })
            }
            Innovation::UniformCube { scale } => {
                if !(*scale > 0.0) {
                    return Err(Error::Config("uniform innovation scale must be positive".into()));
                }
                (
                    DMatrix::identity(d, d) * (scale * scale / 3.0),
                    Sampler::UniformCube { scale: *scale },
                )
            }
        };
        let total: DMatrix<f64> = coeffs.values().fold(DMatrix::zeros(d, d), |acc, a| acc + a);
        if total.clone().lu().determinant().abs() < 1e-12 {
            log::warn!("sum of filter coefficients is (near) singular; long-run variance may vanish");
        }
        Ok(Self {
            coeffs,
            mu,
            innovation,
            innovation_cov,
            sampler,
            decay: None,
            d,
        })
    }

    /// Attaches a declared decay envelope after verifying every coefficient
    /// respects it.
    pub fn with_decay(mut self, bound: DecayBound) -> Result<Self> {
        for (j, a) in &self.coeffs {
            let env = bound.c * bound.rho.powi(j.unsigned_abs() as i32);
            if a.norm() > env * (1.0 + 1e-9) + f64::MIN_POSITIVE {
                return Err(Error::Config(format!(
                    "coefficient at lag {j} exceeds declared decay envelope"
                )));
            }
        }
        self.decay = Some(bound);
        Ok(self)
    }

    /// Replaces the process mean.
    pub fn with_mean(mut self, mu: DVector<f64>) -> Result<Self> {
        if mu.len() != self.d {
            return Err(Error::Dimension(format!(
                "mean has length {}, process has dimension {}",
                mu.len(),
                self.d
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("process mean".into()));
        }
        self.mu = mu;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn coeffs(&self) -> &BTreeMap<i64, DMatrix<f64>> {
        &self.coeffs
    }

    pub fn coeff(&self, j: i64) -> Option<&DMatrix<f64>> {
        self.coeffs.get(&j)
    }

    pub fn innovation(&self) -> &Innovation {
        &self.innovation
    }

    /// Covariance `V` of a single innovation.
    pub fn innovation_cov(&self) -> &DMatrix<f64> {
        &self.innovation_cov
    }

    pub fn decay(&self) -> Option<DecayBound> {
        self.decay
    }

    /// Smallest and largest lag with a stored coefficient.
    pub fn support(&self) -> (i64, i64) {
        let lo = *self.coeffs.keys().next().expect("nonempty");
        let hi = *self.coeffs.keys().next_back().expect("nonempty");
        (lo, hi)
    }

    pub fn support_width(&self) -> usize {
        let (lo, hi) = self.support();
        (hi - lo) as usize
    }

    fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64], z: &mut DVector<f64>) {
        match &self.sampler {
            Sampler::Gaussian { chol } => {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                lower_mul(chol, z, out);
            }
            Sampler::Mixture { cumulative, shifts, chols } => {
                let u: f64 = rng.random();
                let c = cumulative
                    .iter()
                    .position(|&p| u < p)
                    .unwrap_or(cumulative.len() - 1);
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                lower_mul(&chols[c], z, out);
                for (o, s) in out.iter_mut().zip(shifts[c].iter()) {
                    *o += s;
                }
            }
            Sampler::UniformCube { scale } => {
                for o in out.iter_mut() {
                    *o = scale * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
        }
    }
}

fn lower_mul(l: &DMatrix<f64>, z: &DVector<f64>, out: &mut [f64]) {
    let d = z.len();
    for p in 0..d {
        let mut s = 0.0;
        for q in 0..=p {
            s += l[(p, q)] * z[q];
        }
        out[p] = s;
    }
}

/// Draws `n` consecutive observations of the process.
///
/// `n + support_width` innovations are drawn in time order and the filter is
/// applied exactly.
pub fn gen_linear_process(spec: &LinearProcessSpec, n: usize, seed: SeedSpec) -> Result<Series> {
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    let d = spec.d;
    let (lo, hi) = spec.support();
    let width = (hi - lo) as usize;
    let m = n + width;
    let mut rng = seed.rng();
    let mut eps = vec![0.0; m * d];
    let mut z = DVector::zeros(d);
    for e in eps.chunks_exact_mut(d) {
        spec.draw(&mut rng, e, &mut z);
    }
    // eps[t] holds the innovation with time index t + 1 - hi, so X_i uses
    // eps[i - 1 + hi - j] for lag j.
    let mut data = vec![0.0; n * d];
    if d == 1 {
        let taps: Vec<(usize, f64)> = spec
            .coeffs
            .iter()
            .map(|(j, a)| ((hi - j) as usize, a[(0, 0)]))
            .collect();
        let mu = spec.mu[0];
        for (i, x) in data.iter_mut().enumerate() {
            let mut s = 0.0;
            for &(off, a) in &taps {
                s += a * eps[i + off];
            }
            *x = mu + s;
        }
    } else {
        for i in 0..n {
            let x = &mut data[i * d..(i + 1) * d];
            x.copy_from_slice(spec.mu.as_slice());
            for (j, a) in &spec.coeffs {
                let t = i + (hi - j) as usize;
                let e = &eps[t * d..(t + 1) * d];
                for p in 0..d {
                    let mut s = 0.0;
                    for q in 0..d {
                        s += a[(p, q)] * e[q];
                    }
                    x[p] += s;
                }
            }
        }
    }
    Series::new(data, d)
}

/// Gaussian AR(1) `X_i = phi X_{i-1} + sd * e_i`, as the moving-average filter
/// `A_j = phi^j`, `j = 0..=J`, with `J` the first lag where `|phi|^J < tol`.
/// Exactly-zero coefficients are not stored.
pub fn make_ar1_spec(phi: f64, innovation_sd: f64, truncation_tol: f64) -> Result<LinearProcessSpec> {
    if !(phi.abs() < 1.0) {
        return Err(Error::Domain(format!("AR(1) coefficient {phi} is not stationary")));
    }
    if !(truncation_tol > 0.0) || !(innovation_sd > 0.0) {
        return Err(Error::Domain("truncation tolerance and sd must be positive".into()));
    }
    let mut coeffs = BTreeMap::new();
    let mut a = 1.0f64;
    let mut j = 0i64;
    loop {
        if a != 0.0 {
            coeffs.insert(j, DMatrix::from_element(1, 1, a));
        }
        if a.abs() < truncation_tol {
            break;
        }
        a *= phi;
        j += 1;
    }
    let cov = DMatrix::from_element(1, 1, innovation_sd * innovation_sd);
    LinearProcessSpec::new(coeffs, DVector::zeros(1), Innovation::Gaussian { cov })?.with_decay(DecayBound {
        c: 1.0,
        rho: phi.abs(),
    })
}

/// Univariate MA(q): `X_i = e_i + theta_1 e_{i-1} + ... + theta_q e_{i-q}`.
pub fn make_ma_spec(thetas: &[f64], innovation: Innovation) -> Result<LinearProcessSpec> {
    let mut coeffs = BTreeMap::new();
    coeffs.insert(0, DMatrix::from_element(1, 1, 1.0));
    for (j, &t) in thetas.iter().enumerate() {
        coeffs.insert(j as i64 + 1, DMatrix::from_element(1, 1, t));
    }
    let max = thetas.iter().fold(1.0f64, |m, t| m.max(t.abs()));
    let c = max * 2f64.powi(thetas.len() as i32);
    LinearProcessSpec::new(coeffs, DVector::zeros(1), innovation)?.with_decay(DecayBound { c, rho: 0.5 })
}

/// Vector AR(1) `X_i = Phi X_{i-1} + e_i` as the filter `A_j = Phi^j`,
/// truncated at the first `J` with `||Phi^J|| < tol`.
pub fn make_var1_spec(
    phi: DMatrix<f64>,
    innovation: Innovation,
    truncation_tol: f64,
) -> Result<LinearProcessSpec> {
    let d = phi.nrows();
    if !phi.is_square() {
        return Err(Error::Dimension("VAR(1) matrix must be square".into()));
    }
    let radius = phi
        .complex_eigenvalues()
        .iter()
        .fold(0.0f64, |m, z| m.max(z.norm()));
    if radius >= 1.0 {
        return Err(Error::Domain(format!("VAR(1) spectral radius {radius} is not below 1")));
    }
    if !(truncation_tol > 0.0) {
        return Err(Error::Domain("truncation tolerance must be positive".into()));
    }
    let mut coeffs = BTreeMap::new();
    let mut a = DMatrix::identity(d, d);
    let mut j = 0i64;
    loop {
        let norm = a.norm();
        coeffs.insert(j, a.clone());
        if norm < truncation_tol || j > 100_000 {
            break;
        }
        a = &phi * &a;
        j += 1;
    }
    let rho = 0.5 * (1.0 + radius);
    let c = coeffs
        .iter()
        .map(|(j, a)| a.norm() / rho.powi(*j as i32))
        .fold(0.0, f64::max);
    LinearProcessSpec::new(coeffs, DVector::zeros(d), innovation)?.with_decay(DecayBound { c, rho })
}
