//! Monte Carlo experiments: configuration, replicate simulation, distribution
//! distances, coverage bookkeeping, bias-rate regressions and block-size
//! scans, plus serialization of their results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::{analytic_targets, lag_product_sum, projected_autocov, AnalyticTargets};
use crate::edgeworth::{expansion_cdf, fit_betas, sample_cumulants, BetaFit, ExpansionSpec, GridPoint};
use crate::error::{Error, Result};
use crate::lrv::Variant;
use crate::simulate::{
    gen_linear_process, make_ar1_spec, make_ma_spec, GaussianComponent, Innovation, LinearProcessSpec, SeedSpec,
};
use crate::studentize::{studentized_statistic, SmoothModel};
use crate::tapers::{
    characteristic_exponent, make_weights, optimal_block_order, ExponentSearch, Taper, WeightScheme,
};

/// Nominal levels of the one-sided intervals.
pub const COVERAGE_LEVELS: [f64; 3] = [0.90, 0.95, 0.99];

/// Smallest replicate count accepted for distance metrics.
pub const MIN_REPLICATES: usize = 100;

/// Search interval and tolerance of the expansion quantile.
pub const QUANTILE_BRACKET: (f64, f64) = (-10.0, 10.0);
pub const QUANTILE_TOL: f64 = 1e-10;

/// Stream tags keep evaluation, fitting and bias replicates independent.
const TAG_EVAL: u64 = 1;
const TAG_FIT: u64 = 2;
const TAG_BIAS: u64 = 3;

/// Stream identifier of replicate `index` of grid point `grid` for `tag`.
pub fn stream_id(tag: u64, grid: u64, index: u64) -> u64 {
    (tag << 48) | ((grid & 0xFFFF) << 32) | (index & 0xFFFF_FFFF)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Neumaier-compensated sum.
fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map(Vec::len).unwrap_or(0);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!("{what} must be a nonempty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Innovation law as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum InnovationConfig {
    Gaussian { cov: Vec<Vec<f64>> },
    UniformCube { scale: f64 },
    Mixture { weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<Vec<f64>>> },
}

impl InnovationConfig {
    pub fn build(&self) -> Result<Innovation> {
        Ok(match self {
            InnovationConfig::Gaussian { cov } => Innovation::Gaussian { cov: matrix_from_rows(cov, "innovation covariance")? },
            InnovationConfig::UniformCube { scale } => Innovation::UniformCube { scale: *scale },
            InnovationConfig::Mixture { weights, means, covs } => {
                if means.len() != weights.len() || covs.len() != weights.len() {
                    return Err(Error::Config("mixture weights, means and covs differ in length".into()));
                }
                let components = means
                    .iter()
                    .zip(covs)
                    .map(|(m, c)| {
                        Ok(GaussianComponent {
                            mean: DVector::from_vec(m.clone()),
                            cov: matrix_from_rows(c, "mixture covariance")?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Innovation::Mixture { weights: weights.clone(), components }
            }
        })
    }
}

/// One filter coefficient `A_lag`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagMatrix {
    pub lag: i64,
    pub matrix: Vec<Vec<f64>>,
}

fn unit() -> f64 {
    1.0
}

fn default_truncation_tol() -> f64 {
    1e-12
}

/// Named process family with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessConfig {
    Ar1 {
        phi: f64,
        #[serde(default = "unit")]
        innovation_sd: f64,
        #[serde(default = "default_truncation_tol")]
        truncation_tol: f64,
        #[serde(default)]
        mean: f64,
    },
    Ma {
        thetas: Vec<f64>,
        #[serde(default)]
        innovation: Option<InnovationConfig>,
        #[serde(default)]
        mean: f64,
    },
    Linear {
        coeffs: Vec<LagMatrix>,
        mean: Vec<f64>,
        innovation: InnovationConfig,
    },
}

impl ProcessConfig {
    pub fn build(&self) -> Result<LinearProcessSpec> {
        match self {
            ProcessConfig::Ar1 { phi, innovation_sd, truncation_tol, mean } => {
                make_ar1_spec(*phi, *innovation_sd, *truncation_tol)?.with_mean(DVector::from_element(1, *mean))
            }
            ProcessConfig::Ma { thetas, innovation, mean } => {
                let innovation = match innovation {
                    Some(i) => i.build()?,
                    None => Innovation::standard_gaussian(1),
                };
                make_ma_spec(thetas, innovation)?.with_mean(DVector::from_element(1, *mean))
            }
            ProcessConfig::Linear { coeffs, mean, innovation } => {
                let mut map = BTreeMap::new();
                for c in coeffs {
                    if map.insert(c.lag, matrix_from_rows(&c.matrix, "coefficient")?).is_some() {
                        return Err(Error::Config(format!("lag {} given twice", c.lag)));
                    }
                }
                LinearProcessSpec::new(map, DVector::from_vec(mean.clone()), innovation.build()?)
            }
        }
    }
}

/// How the block length is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllRule {
    Fixed(usize),
    /// `ℓ = ⌈c n^{1/(2r)}⌉` with `r` the taper's characteristic exponent.
    OptimalOrder(f64),
}

fn default_model() -> String {
    "identity".into()
}

fn default_variant() -> Variant {
    Variant::V0
}

fn default_fit_replicates() -> usize {
    20_000
}

fn default_kappa() -> f64 {
    0.1
}

/// Full description of a Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub process: ProcessConfig,
    #[serde(default = "default_model")]
    pub model: String,
    pub taper: String,
    pub ell_rule: EllRule,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub n: usize,
    pub replicates: usize,
    pub master_seed: u64,
    /// `(n, ℓ)` points for fitting the expansion coefficients.
    #[serde(default)]
    pub beta_fit_grid: Option<Vec<(usize, usize)>>,
    #[serde(default = "default_fit_replicates")]
    pub beta_fit_replicates: usize,
    /// κ of the block-growth check.
    #[serde(default = "default_kappa")]
    pub growth_kappa: f64,
    /// Path prefix for result files.
    #[serde(default)]
    pub outputs: Option<String>,
}

/// A validated configuration with every derived object built.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub spec: LinearProcessSpec,
    pub model: SmoothModel,
    pub taper: Option<Taper>,
    pub scheme: WeightScheme,
    pub ell: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Block length implied by the rule for sample size `n`.
    pub fn ell_for(&self, n: usize) -> Result<usize> {
        match self.ell_rule {
            EllRule::Fixed(ell) => Ok(ell),
            EllRule::OptimalOrder(c) => {
                let taper: Taper = self.taper.parse().map_err(|_| {
                    Error::Config(format!("optimal_order needs a taper, got `{}`", self.taper))
                })?;
                let exp = characteristic_exponent(&taper, &ExponentSearch::default())?;
                optimal_block_order(&exp, n, c)
            }
        }
    }

    /// Weight scheme at block length `ell`.
    pub fn scheme_for(&self, ell: usize) -> Result<WeightScheme> {
        WeightScheme::parse(&self.taper, ell)
    }

    pub fn resolve(&self) -> Result<ResolvedExperiment> {
        if self.n < 3 {
            return Err(Error::Config(format!("n must be at least 3, got {}", self.n)));
        }
        if self.replicates < MIN_REPLICATES {
            return Err(Error::Config(format!(
                "replicates must be at least {MIN_REPLICATES}, got {}",
                self.replicates
            )));
        }
        if !(self.growth_kappa > 0.0 && self.growth_kappa < 1.0) {
            return Err(Error::Config("growth_kappa must lie in (0, 1)".into()));
        }
        let ell = self.ell_for(self.n)?;
        if ell == 0 || ell >= self.n {
            return Err(Error::Lag { lag: ell, n: self.n });
        }
        let scheme = self.scheme_for(ell)?;
        let spec = self.process.build()?;
        let model = SmoothModel::parse(&self.model, spec.dim())?.with_mu(spec.mu().as_slice().to_vec())?;
        if let Some(grid) = &self.beta_fit_grid {
            if grid.len() < 3 {
                return Err(Error::Config("beta_fit_grid needs at least 3 points".into()));
            }
            for (i, &(n, l)) in grid.iter().enumerate() {
                if l == 0 || l >= n {
                    return Err(Error::Lag { lag: l, n });
                }
                if grid[..i].contains(&(n, l)) {
                    return Err(Error::Config(format!("duplicate grid point ({n}, {l})")));
                }
            }
            if self.beta_fit_replicates < MIN_REPLICATES {
                return Err(Error::Config(format!(
                    "beta_fit_replicates must be at least {MIN_REPLICATES}"
                )));
            }
        }
        Ok(ResolvedExperiment {
            spec,
            model,
            taper: self.taper.parse().ok(),
            scheme,
            ell,
        })
    }
}

/// Which side of the block-growth band is violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockGrowth {
    Ok,
    Violation { side: GrowthSide, reason: String },
}

/// Checks `κ log n < ℓ < κ^{-1} n^{1/2 - κ}`, lower side first.
pub fn check_block_growth(n: usize, ell: usize, kappa: f64) -> Result<BlockGrowth> {
    if n < 3 {
        return Err(Error::Domain(format!("n must be at least 3, got {n}")));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::Domain(format!("kappa must lie in (0, 1), got {kappa}")));
    }
    let nf = n as f64;
    let lf = ell as f64;
    let lower = kappa * nf.ln();
    if !(lower < lf) {
        return Ok(BlockGrowth::Violation {
            side: GrowthSide::Lower,
            reason: format!("ell = {ell} is not above kappa*ln(n) = {lower:.4}"),
        });
    }
    let upper = nf.powf(0.5 - kappa) / kappa;
    if !(lf < upper) {
        return Ok(BlockGrowth::Violation {
            side: GrowthSide::Upper,
            reason: format!("ell = {ell} is not below n^(1/2-kappa)/kappa = {upper:.4}"),
        });
    }
    Ok(BlockGrowth::Ok)
}

fn sup_distance_sorted<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let r = sorted.len() as f64;
    sorted.iter().enumerate().fold(0.0f64, |worst, (i, &x)| {
        let f = cdf(x);
        let hi = ((i + 1) as f64 / r - f).abs();
        let lo = (i as f64 / r - f).abs();
        worst.max(hi).max(lo)
    })
}

fn sorted_copy(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Domain("distance needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// `sup_x |F_R(x) - F(x)|` for the ECDF `F_R` of `samples`, evaluated at both
/// sides of every jump.
pub fn ecdf_sup_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<f64> {
    Ok(sup_distance_sorted(&sorted_copy(samples)?, cdf))
}

/// `sup_x |F_a(x) - F_b(x)|` between two ECDFs (both right-continuous).
pub fn ecdf_distance_between(a: &[f64], b: &[f64]) -> Result<f64> {
    let a = sorted_copy(a)?;
    let b = sorted_copy(b)?;
    let (ra, rb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut worst = 0.0f64;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        worst = worst.max((i as f64 / ra - j as f64 / rb).abs());
    }
    Ok(worst)
}

/// Solves `Ψ(q) = p` by bisection on the fixed bracket.
pub fn expansion_quantile(p: f64, spec: &ExpansionSpec) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("probability must lie in (0, 1), got {p}")));
    }
    let (mut lo, mut hi) = QUANTILE_BRACKET;
    if !(expansion_cdf(lo, spec) < p && expansion_cdf(hi, spec) > p) {
        return Err(Error::Degenerate(format!("expansion does not bracket probability {p}")));
    }
    while hi - lo > QUANTILE_TOL {
        let mid = 0.5 * (lo + hi);
        if expansion_cdf(mid, spec) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Result of one studentized replicate.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Draw {
    t: f64,
    oracle_t: f64,
    tau_sq: f64,
    floored: bool,
}

#[allow(clippy::too_many_arguments)]
fn simulate_draws(
    spec: &LinearProcessSpec,
    model: &SmoothModel,
    scheme: &WeightScheme,
    variant: Variant,
    n: usize,
    replicates: usize,
    master_seed: u64,
    tag: u64,
    grid: u64,
    sigma_inf: f64,
) -> Result<Vec<Draw>> {
    let theta = model.theta().ok_or_else(|| Error::Config("model has no true parameter".into()))?;
    let root_n = (n as f64).sqrt();
    let results: Vec<Result<Draw>> = (0..replicates as u64)
        .into_par_iter()
        .map(|index| {
            let seed = SeedSpec::new(master_seed, stream_id(tag, grid, index));
            let run = || -> Result<Draw> {
                let series = gen_linear_process(spec, n, seed)?;
                let v = studentized_statistic(&series, model, scheme, variant)?;
                if !v.t.is_finite() {
                    return Err(Error::NonFinite("studentized statistic".into()));
                }
                Ok(Draw {
                    t: v.t,
                    oracle_t: root_n * (v.theta_hat - theta) / sigma_inf,
                    tau_sq: v.tau_hat * v.tau_hat,
                    floored: v.floored,
                })
            };
            run().map_err(|e| Error::Replicate { index, source: Box::new(e) })
        })
        .collect();
    // Report the lowest failing index, independent of scheduling.
    results.into_iter().collect()
}

/// Empirical one-sided coverage at one nominal level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub nominal: f64,
    pub empirical: f64,
    pub std_error: f64,
}

fn coverage_at(stats: &[f64], quantile: f64, nominal: f64) -> Coverage {
    let r = stats.len() as f64;
    let hits = stats.iter().filter(|&&t| t <= quantile).count() as f64;
    let p = hits / r;
    Coverage {
        nominal,
        empirical: p,
        std_error: (p * (1.0 - p) / r).sqrt(),
    }
}

fn level_key(level: f64) -> String {
    format!("{level:.2}")
}

/// Coefficient fit feeding the expansion comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionFit {
    pub grid: Vec<GridPoint>,
    pub fit: BetaFit,
}

/// Summary of a run. `ecdf_grid` goes to the CSV table and `timing` is kept
/// out of serialized output so result files depend only on the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub n: usize,
    pub ell: usize,
    pub replicates: usize,
    pub variant: Variant,
    pub taper: String,
    pub master_seed: u64,
    pub targets: AnalyticTargets,
    pub block_growth: BlockGrowth,
    #[serde(skip)]
    pub ecdf_grid: Vec<f64>,
    pub sup_dist_normal: f64,
    pub sup_dist_ee: Option<f64>,
    /// One-sided coverage `P(T <= q_level)`; `q` from the expansion when fitted,
    /// the Normal quantile otherwise.
    pub coverage: BTreeMap<String, Coverage>,
    pub coverage_normal: BTreeMap<String, Coverage>,
    /// Coverage with the true long-run variance in place of the estimate.
    pub oracle_coverage: BTreeMap<String, Coverage>,
    /// Every oracle coverage within three binomial standard errors of nominal.
    pub oracle_consistent: bool,
    /// Mean estimated squared studentizing factor minus the long-run variance.
    pub lrv_bias: Option<f64>,
    pub floored_fraction: f64,
    pub fitted_spec: Option<ExpansionSpec>,
    pub expansion_fit: Option<ExpansionFit>,
    #[serde(skip)]
    pub timing: f64,
}

impl ExperimentResult {
    /// Largest `|empirical - nominal|` over the reported coverage levels.
    pub fn coverage_error(&self) -> f64 {
        self.coverage
            .values()
            .fold(0.0f64, |m, c| m.max((c.empirical - c.nominal).abs()))
    }
}

/// Fits the expansion coefficients from independent replicates on `grid`.
pub fn fit_expansion(config: &ExperimentConfig, resolved: &ResolvedExperiment, grid: &[(usize, usize)]) -> Result<ExpansionFit> {
    let mut points = Vec::with_capacity(grid.len());
    for (g, &(n, ell)) in grid.iter().enumerate() {
        let scheme = config.scheme_for(ell)?;
        let targets = analytic_targets(&resolved.spec, &resolved.model, n, &scheme)?;
        let draws = simulate_draws(
            &resolved.spec,
            &resolved.model,
            &scheme,
            config.variant,
            n,
            config.beta_fit_replicates,
            config.master_seed,
            TAG_FIT,
            g as u64,
            targets.sigma_inf_sq.sqrt(),
        )?;
        let t: Vec<f64> = draws.iter().map(|d| d.t).collect();
        points.push(GridPoint {
            n: n as u64,
            ell,
            cumulants: sample_cumulants(&t)?,
            e_n_sq: targets.e_n * targets.e_n,
        });
    }
    let fit = fit_betas(&points)?;
    Ok(ExpansionFit { grid: points, fit })
}

/// Runs the configured experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let start = Instant::now();
    let resolved = config.resolve()?;
    let n = config.n;
    let ell = resolved.ell;
    let block_growth = check_block_growth(n, ell, config.growth_kappa)?;
    if let BlockGrowth::Violation { reason, .. } = &block_growth {
        log::warn!("block growth condition: {reason}");
    }
    let targets = analytic_targets(&resolved.spec, &resolved.model, n, &resolved.scheme)?;
    if !(targets.sigma_inf_sq > 0.0) {
        return Err(Error::NonPositiveVariance(targets.sigma_inf_sq));
    }

    let (fitted_spec, expansion_fit) = match &config.beta_fit_grid {
        Some(grid) => {
            let fit = fit_expansion(config, &resolved, grid)?;
            let spec = ExpansionSpec::new(fit.fit.betas, targets.e_n, targets.a_n_inv, n as u64, targets.b_n)?;
            (Some(spec), Some(fit))
        }
        None => (None, None),
    };

    let draws = simulate_draws(
        &resolved.spec,
        &resolved.model,
        &resolved.scheme,
        config.variant,
        n,
        config.replicates,
        config.master_seed,
        TAG_EVAL,
        0,
        targets.sigma_inf_sq.sqrt(),
    )?;

    let mut ecdf_grid: Vec<f64> = draws.iter().map(|d| d.t).collect();
    ecdf_grid.sort_by(f64::total_cmp);
    let normal = std_normal();
    let sup_dist_normal = sup_distance_sorted(&ecdf_grid, |x| normal.cdf(x));
    let sup_dist_ee = fitted_spec.map(|s| sup_distance_sorted(&ecdf_grid, |x| expansion_cdf(x, &s)));

    let oracle: Vec<f64> = draws.iter().map(|d| d.oracle_t).collect();
    let r = config.replicates as f64;
    let mut coverage = BTreeMap::new();
    let mut coverage_normal = BTreeMap::new();
    let mut oracle_coverage = BTreeMap::new();
    let mut oracle_consistent = true;
    for level in COVERAGE_LEVELS {
        let z = normal.inverse_cdf(level);
        let cn = coverage_at(&ecdf_grid, z, level);
        let co = coverage_at(&oracle, z, level);
        let null_se = (level * (1.0 - level) / r).sqrt();
        oracle_consistent &= (co.empirical - level).abs() <= 3.0 * null_se;
        let primary = match &fitted_spec {
            Some(s) => coverage_at(&ecdf_grid, expansion_quantile(level, s)?, level),
            None => cn,
        };
        coverage.insert(level_key(level), primary);
        coverage_normal.insert(level_key(level), cn);
        oracle_coverage.insert(level_key(level), co);
    }

    let mean_tau_sq = compensated_sum(draws.iter().map(|d| d.tau_sq)) / r;
    let floored_fraction = draws.iter().filter(|d| d.floored).count() as f64 / r;

    Ok(ExperimentResult {
        n,
        ell,
        replicates: config.replicates,
        variant: config.variant,
        taper: config.taper.clone(),
        master_seed: config.master_seed,
        targets,
        block_growth,
        ecdf_grid,
        sup_dist_normal,
        sup_dist_ee,
        coverage,
        coverage_normal,
        oracle_coverage,
        oracle_consistent,
        lrv_bias: Some(mean_tau_sq - targets.sigma_inf_sq),
        floored_fraction,
        fitted_spec,
        expansion_fit,
        timing: start.elapsed().as_secs_f64(),
    })
}

/// Writes `<prefix>.json` (summary) and `<prefix>_ecdf.csv` (sorted
/// statistics with the ECDF and model CDFs); returns the written paths.
pub fn write_experiment_outputs(result: &ExperimentResult, prefix: &str) -> Result<Vec<PathBuf>> {
    let json_path = PathBuf::from(format!("{prefix}.json"));
    let csv_path = PathBuf::from(format!("{prefix}_ecdf.csv"));
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(result)?;
    text.push('\n');
    fs::write(&json_path, text)?;

    let normal = std_normal();
    let mut wtr = csv::Writer::from_path(&csv_path)?;
    wtr.write_record(["t", "ecdf", "normal_cdf", "expansion_cdf"])?;
    let r = result.ecdf_grid.len() as f64;
    for (i, &t) in result.ecdf_grid.iter().enumerate() {
        let ee = result
            .fitted_spec
            .map(|s| expansion_cdf(t, &s).to_string())
            .unwrap_or_default();
        wtr.write_record([
            t.to_string(),
            ((i + 1) as f64 / r).to_string(),
            normal.cdf(t).to_string(),
            ee,
        ])?;
    }
    wtr.flush()?;
    Ok(vec![json_path, csv_path])
}

/// One `(ℓ, |bias|)` observation for a log-log rate fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub ell: usize,
    pub bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `log|bias|` on `log ℓ`.
pub fn bias_rate_regression(points: &[RatePoint]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::Domain(format!("rate fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|p| p.ell == 0 || !p.bias.is_finite()) {
        return Err(Error::Domain("rate fit needs positive ell and finite bias".into()));
    }
    let positive = points[0].bias > 0.0;
    if points.iter().any(|p| p.bias == 0.0 || (p.bias > 0.0) != positive) {
        return Err(Error::SignMixing);
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.ell as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.bias.abs().ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("rate fit needs at least two distinct ell".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Monte Carlo bias of one lag-window estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub taper: String,
    pub ell: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    pub std_error: f64,
}

/// Bias of the known-mean, `1/n`-scaled lag-window estimator of the long-run
/// variance of a univariate process, for every `(taper, ℓ)` pair, relative to
/// the exact long-run variance. Every replicate path is shared by all pairs.
pub fn lrv_bias_scan(
    spec: &LinearProcessSpec,
    tapers: &[Taper],
    ells: &[usize],
    n: usize,
    replicates: usize,
    master_seed: u64,
) -> Result<Vec<BiasPoint>> {
    if spec.dim() != 1 {
        return Err(Error::Dimension("bias scan needs a univariate process".into()));
    }
    if replicates < 2 {
        return Err(Error::Domain("bias scan needs at least two replicates".into()));
    }
    let max_ell = ells.iter().copied().max().ok_or_else(|| Error::Domain("no block lengths".into()))?;
    if ells.contains(&0) || max_ell >= n {
        return Err(Error::Lag { lag: max_ell, n });
    }
    let gamma = projected_autocov(spec, &DVector::from_element(1, 1.0));
    let sigma_inf_sq = gamma[0] + 2.0 * gamma[1..].iter().sum::<f64>();
    let mut schemes = Vec::new();
    for taper in tapers {
        for &ell in ells {
            schemes.push((taper.name(), ell, make_weights(taper, ell)?));
        }
    }
    let mu = spec.mu()[0];
    let estimates: Vec<Result<Vec<f64>>> = (0..replicates as u64)
        .into_par_iter()
        .map(|index| {
            let seed = SeedSpec::new(master_seed, stream_id(TAG_BIAS, 0, index));
            let series = gen_linear_process(spec, n, seed)
                .map_err(|e| Error::Replicate { index, source: Box::new(e) })?;
            let centered: Vec<f64> = series.as_slice().iter().map(|x| x - mu).collect();
            let g: Vec<f64> = (0..=max_ell)
                .map(|k| lag_product_sum(&centered, 1, k)[(0, 0)] / n as f64)
                .collect();
            Ok(schemes
                .iter()
                .map(|(_, ell, scheme)| g[0] + 2.0 * (1..=*ell).map(|k| scheme.weight(k) * g[k]).sum::<f64>())
                .collect())
        })
        .collect();
    let estimates: Vec<Vec<f64>> = estimates.into_iter().collect::<Result<_>>()?;
    let r = replicates as f64;
    Ok(schemes
        .iter()
        .enumerate()
        .map(|(j, (name, ell, _))| {
            let mean = compensated_sum(estimates.iter().map(|e| e[j])) / r;
            let var = compensated_sum(estimates.iter().map(|e| (e[j] - mean).powi(2))) / (r - 1.0);
            BiasPoint {
                taper: name.clone(),
                ell: *ell,
                mean_estimate: mean,
                bias: mean - sigma_inf_sq,
                std_error: (var / r).sqrt(),
            }
        })
        .collect())
}

/// One row of a block-length scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub ell: usize,
    pub sup_dist_normal: f64,
    pub coverage_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub rows: Vec<ScanRow>,
    /// Block length with the smallest distance to the Normal (first on ties).
    pub best_ell: usize,
}

/// Repeats the experiment at each fixed `ℓ` with the same seeds, so rows
/// differ only through `ℓ`.
pub fn block_size_scan(config: &ExperimentConfig, ells: &[usize]) -> Result<ScanReport> {
    if ells.is_empty() {
        return Err(Error::Config("scan needs at least one block length".into()));
    }
    if let Some(&bad) = ells.iter().find(|&&l| l == 0 || l >= config.n) {
        return Err(Error::Lag { lag: bad, n: config.n });
    }
    let mut rows = Vec::with_capacity(ells.len());
    for &ell in ells {
        let cfg = ExperimentConfig {
            ell_rule: EllRule::Fixed(ell),
            ..config.clone()
        };
        let res = run_experiment(&cfg)?;
        rows.push(ScanRow {
            ell,
            sup_dist_normal: res.sup_dist_normal,
            coverage_error: res.coverage_error(),
        });
    }
    let best_ell = rows
        .iter()
        .fold(None::<&ScanRow>, |best, row| match best {
            Some(b) if b.sup_dist_normal <= row.sup_dist_normal => Some(b),
            _ => Some(row),
        })
        .map(|r| r.ell)
        .expect("nonempty");
    Ok(ScanReport { rows, best_ell })
}

/// Writes `<prefix>_scan.csv` and `<prefix>_scan.json`.
pub fn write_scan_outputs(report: &ScanReport, prefix: &str) -> Result<Vec<PathBuf>> {
    let csv_path = PathBuf::from(format!("{prefix}_scan.csv"));
    let json_path = PathBuf::from(format!("{prefix}_scan.json"));
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut wtr = csv::Writer::from_path(&csv_path)?;
    wtr.write_record(["ell", "sup_dist_normal", "coverage_error"])?;
    for row in &report.rows {
        wtr.write_record([row.ell.to_string(), row.sup_dist_normal.to_string(), row.coverage_error.to_string()])?;
    }
    wtr.flush()?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(&json_path, text)?;
    Ok(vec![csv_path, json_path])
}
