//! Lag-window tapers, materialized weight schemes and block-size order rules.
//!
//! A taper `w: [0, 1] -> R` generates lag weights `w_k = w(k / ell)` for
//! `k = 1..=ell`; lag 0 always carries weight 1 and is never stored. The
//! moving block bootstrap scheme is not a taper in this sense (its weights
//! are `ell^{-1/2}`) and is represented only as a [`WeightScheme`] source.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Built-in lag-window kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Taper {
    /// `w(y) = 1 - y`.
    Bartlett,
    /// Cubic on `[0, 1/2]`, `2(1 - y)^3` on `[1/2, 1]`.
    Parzen,
    /// `w(y) = sin(pi y) / (pi y)`, `w(0) = 1`.
    Daniell,
    /// Trapezoid: 1 on `[0, width]`, linear down to 0 at `y = 1`.
    FlatTop { width: f64 },
}

const DANIELL_SERIES_CUTOFF: f64 = 1e-4;

impl Taper {
    pub fn flat_top(width: f64) -> Result<Self> {
        if !(width > 0.0 && width <= 1.0) {
            return Err(Error::Domain(format!(
                "flat-top width must lie in (0, 1], got {width}"
            )));
        }
        Ok(Taper::FlatTop { width })
    }

    pub fn name(&self) -> String {
        match self {
            Taper::Bartlett => "bartlett".into(),
            Taper::Parzen => "parzen".into(),
            Taper::Daniell => "daniell".into(),
            Taper::FlatTop { width } => format!("flattop:{width}"),
        }
    }

    /// Width of the region where the taper is identically one.
    pub fn flat_top_width(&self) -> Option<f64> {
        match self {
            Taper::FlatTop { width } => Some(*width),
            _ => None,
        }
    }

    /// Declared bound on `|w(y)|` over `[0, 1]`.
    pub fn bound(&self) -> f64 {
        1.0
    }

    /// Evaluates `w(y)` for `y` in `[0, 1]`.
    pub fn evaluate(&self, y: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::Domain(format!("taper argument {y} outside [0, 1]")));
        }
        Ok(self.eval_unchecked(y))
    }

    fn eval_unchecked(&self, y: f64) -> f64 {
        match *self {
            Taper::Bartlett => 1.0 - y,
            Taper::Parzen => {
                if y <= 0.5 {
                    1.0 - 6.0 * y * y + 6.0 * y * y * y
                } else {
                    2.0 * (1.0 - y).powi(3)
                }
            }
            Taper::Daniell => {
                let z = PI * y;
                if y < DANIELL_SERIES_CUTOFF {
                    let z2 = z * z;
                    1.0 - z2 / 6.0 + z2 * z2 / 120.0
                } else {
                    z.sin() / z
                }
            }
            Taper::FlatTop { width } => {
                if y <= width {
                    1.0
                } else {
                    (1.0 - y) / (1.0 - width)
                }
            }
        }
    }
}

impl fmt::Display for Taper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Free-function form of [`Taper::evaluate`].
pub fn eval_taper(taper: &Taper, y: f64) -> Result<f64> {
    taper.evaluate(y)
}

/// Where the weights of a [`WeightScheme`] came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Taper(Taper),
    Mbb,
    Explicit,
}

/// Lag weights `w_1..w_ell` for a truncation lag `ell`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    ell: usize,
    weights: Vec<f64>,
    source: WeightSource,
}

impl WeightScheme {
    /// Moving block bootstrap weights, each equal to `ell^{-1/2}`.
    pub fn mbb(ell: usize) -> Result<Self> {
        if ell == 0 {
            return Err(Error::Domain("ell must be at least 1".into()));
        }
        let w = 1.0 / (ell as f64).sqrt();
        Ok(Self {
            ell,
            weights: vec![w; ell],
            source: WeightSource::Mbb,
        })
    }

    pub fn explicit(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Domain("explicit scheme needs at least one weight".into()));
        }
        if let Some(bad) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("explicit weight {bad}")));
        }
        Ok(Self {
            ell: weights.len(),
            weights,
            source: WeightSource::Explicit,
        })
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn source(&self) -> &WeightSource {
        &self.source
    }

    /// Weight for lag `k`; `k = 0` is 1 and lags beyond `ell` are 0.
    pub fn weight(&self, k: usize) -> f64 {
        match k {
            0 => 1.0,
            k if k <= self.ell => self.weights[k - 1],
            _ => 0.0,
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }

    /// Scheme with `w_k * n / (n - k)`: the lag-window weights that make the
    /// `1/n`-scaled estimator reproduce the `1/(n - k)`-scaled one.
    pub fn reweighted(&self, n: usize) -> Result<Self> {
        if self.ell >= n {
            return Err(Error::Lag { lag: self.ell, n });
        }
        let nf = n as f64;
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let k = (i + 1) as f64;
                w * nf / (nf - k)
            })
            .collect();
        Ok(Self {
            ell: self.ell,
            weights,
            source: WeightSource::Explicit,
        })
    }

    /// Parses a scheme specification: `bartlett`, `parzen`, `daniell`,
    /// `flattop:<b>` or `mbb` (all with the supplied `ell`), or
    /// `explicit:<w1>,<w2>,...` / a bare comma-separated list, whose length
    /// defines `ell`.
    pub fn parse(spec: &str, ell: usize) -> Result<Self> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("mbb") {
            return Self::mbb(ell);
        }
        let list = spec
            .strip_prefix("explicit:")
            .or_else(|| spec.contains(',').then_some(spec));
        if let Some(list) = list {
            let weights = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad weight `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            return Self::explicit(weights);
        }
        if let Ok(w) = spec.parse::<f64>() {
            return Self::explicit(vec![w]);
        }
        make_weights(&spec.parse::<Taper>()?, ell)
    }
}

impl FromStr for Taper {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "bartlett" => Ok(Taper::Bartlett),
            "parzen" => Ok(Taper::Parzen),
            "daniell" => Ok(Taper::Daniell),
            "flattop" => Taper::flat_top(0.5),
            other => match other.strip_prefix("flattop:") {
                Some(b) => {
                    let width = b
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad flat-top width `{b}`")))?;
                    Taper::flat_top(width)
                }
                None => Err(Error::Config(format!("unknown taper `{s}`"))),
            },
        }
    }
}

/// Materializes `w_k = w(k / ell)` for `k = 1..=ell`.
pub fn make_weights(taper: &Taper, ell: usize) -> Result<WeightScheme> {
    if ell == 0 {
        return Err(Error::Domain("ell must be at least 1".into()));
    }
    let weights = (1..=ell)
        .map(|k| taper.evaluate(k as f64 / ell as f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightScheme {
        ell,
        weights,
        source: WeightSource::Taper(*taper),
    })
}

/// Behaviour of `(1 - w(y)) / y^r` as `y -> 0+`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharacteristicExponent {
    Finite { r: u32, w_r: f64 },
    InfiniteOrder,
}

/// Grid and stopping rule for [`characteristic_exponent`].
#[derive(Debug, Clone)]
pub struct ExponentSearch {
    pub grid: Vec<f64>,
    pub tol: f64,
    pub max_order: u32,
}

impl Default for ExponentSearch {
    fn default() -> Self {
        Self {
            grid: (4..=14).map(|j| 2f64.powi(-j)).collect(),
            tol: 1e-3,
            max_order: 6,
        }
    }
}

/// Estimates the characteristic exponent `r` and the limit
/// `w_r = lim (1 - w(y)) / y^r`.
///
/// For `r = 1, 2, ...` the ratio is tabulated on the grid. A ratio whose
/// last three values agree to `tol` (relative) and is not itself below `tol`
/// gives the answer; the limit is refined by one Richardson step assuming a
/// linear correction in `y`. A ratio that has already fallen below `tol`
/// moves the search to `r + 1`. Vanishing ratios at every order up to the
/// cap mean an infinite-order (flat-top) taper.
pub fn characteristic_exponent(taper: &Taper, search: &ExponentSearch) -> Result<CharacteristicExponent> {
    let grid = &search.grid;
    if grid.len() < 3 {
        return Err(Error::Domain("exponent grid needs at least three points".into()));
    }
    if grid.iter().any(|&y| !(y > 0.0 && y < 1.0)) || grid.windows(2).any(|p| p[1] >= p[0]) {
        return Err(Error::Domain(
            "exponent grid must be strictly decreasing inside (0, 1)".into(),
        ));
    }
    if !(search.tol > 0.0) {
        return Err(Error::Domain("tolerance must be positive".into()));
    }
    let gaps = grid
        .iter()
        .map(|&y| taper.evaluate(y).map(|w| (y, 1.0 - w)))
        .collect::<Result<Vec<_>>>()?;

    for r in 1..=search.max_order {
        let ratios: Vec<f64> = gaps.iter().map(|&(y, g)| g / y.powi(r as i32)).collect();
        let m = ratios.len();
        let tail = &ratios[m - 3..];
        let last = tail[2];
        let stable = tail
            .windows(2)
            .all(|p| (p[1] - p[0]).abs() <= search.tol * p[1].abs());
        if stable && last.abs() >= search.tol {
            let (y_prev, y_last) = (grid[m - 2], grid[m - 1]);
            // Richardson step for R(y) = L + c y.
            let w_r = (y_prev * last - y_last * tail[1]) / (y_prev - y_last);
            return Ok(CharacteristicExponent::Finite { r, w_r });
        }
        if last.abs() < search.tol {
            continue;
        }
        return Err(Error::NonConvergence { cap: search.max_order });
    }
    Ok(CharacteristicExponent::InfiniteOrder)
}

fn ceil_tolerant(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// Block-size order rule: `ceil(c n^{1/(2r)})` for finite `r`, `ceil(c log n)`
/// for infinite-order tapers. Values within floating-point noise of an
/// integer are not bumped up by the ceiling. The result is at least 1.
pub fn optimal_block_order(exponent: &CharacteristicExponent, n: usize, c: f64) -> Result<usize> {
    if n < 2 {
        return Err(Error::Domain(format!("n must be at least 2, got {n}")));
    }
    if !(c > 0.0) {
        return Err(Error::Domain(format!("order constant must be positive, got {c}")));
    }
    let nf = n as f64;
    let raw = match exponent {
        CharacteristicExponent::Finite { r, .. } => c * nf.powf(1.0 / (2.0 * *r as f64)),
        CharacteristicExponent::InfiniteOrder => c * nf.ln(),
    };
    Ok(ceil_tolerant(raw).max(1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const BUILTINS: [Taper; 4] = [
        Taper::Bartlett,
        Taper::Parzen,
        Taper::Daniell,
        Taper::FlatTop { width: 0.5 },
    ];

    #[test]
    fn closed_forms() {
        assert_eq!(eval_taper(&Taper::Bartlett, 0.25).unwrap(), 0.75);
        assert_abs_diff_eq!(eval_taper(&Taper::Parzen, 0.5).unwrap(), 0.25, epsilon = 1e-15);
        for t in BUILTINS {
            assert_eq!(t.evaluate(0.0).unwrap(), 1.0, "{t}");
        }
    }

    #[test]
    fn out_of_domain() {
        assert!(matches!(Taper::Bartlett.evaluate(1.5), Err(Error::Domain(_))));
        assert!(matches!(Taper::Parzen.evaluate(-1e-9), Err(Error::Domain(_))));
    }

    #[test]
    fn daniell_series_matches_closed_form_near_cutoff() {
        let y = DANIELL_SERIES_CUTOFF * 0.999;
        let z = PI * y;
        assert_abs_diff_eq!(Taper::Daniell.evaluate(y).unwrap(), z.sin() / z, epsilon = 1e-15);
    }

    #[test]
    fn weights_examples() {
        let w = make_weights(&Taper::Bartlett, 4).unwrap();
        assert_eq!(w.weights(), &[0.75, 0.5, 0.25, 0.0]);
        let w = make_weights(&Taper::flat_top(1.0).unwrap(), 3).unwrap();
        assert_eq!(w.weights(), &[1.0, 1.0, 1.0]);
        let w = make_weights(&Taper::Bartlett, 1).unwrap();
        assert_eq!(w.weights(), &[0.0]);
    }

    #[test]
    fn weights_match_pointwise_evaluation() {
        for t in BUILTINS {
            for ell in [1usize, 2, 7, 64, 333] {
                let w = make_weights(&t, ell).unwrap();
                assert_eq!(w.ell(), ell);
                for k in 1..=ell {
                    assert_eq!(w.weight(k), t.evaluate(k as f64 / ell as f64).unwrap());
                }
            }
        }
    }

    #[test]
    fn mbb_weights_are_normalized() {
        for ell in 1..=1024 {
            let s = WeightScheme::mbb(ell).unwrap();
            assert!((s.sum_of_squares() - 1.0).abs() <= 1e-12, "ell = {ell}");
            assert!(s.weights().iter().all(|&w| w == 1.0 / (ell as f64).sqrt()));
        }
    }

    #[test]
    fn bartlett_full_length_is_cesaro() {
        let n = 97;
        let w = make_weights(&Taper::Bartlett, n).unwrap();
        for k in 1..=n {
            assert_abs_diff_eq!(w.weight(k), 1.0 - k as f64 / n as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn exponents_of_builtins() {
        let s = ExponentSearch::default();
        let expect = [
            (Taper::Bartlett, 1, 1.0),
            (Taper::Parzen, 2, 6.0),
            (Taper::Daniell, 2, PI * PI / 6.0),
        ];
        for (t, r0, w0) in expect {
            match characteristic_exponent(&t, &s).unwrap() {
                CharacteristicExponent::Finite { r, w_r } => {
                    assert_eq!(r, r0, "{t}");
                    assert!((w_r - w0).abs() <= 1e-4, "{t}: {w_r} vs {w0}");
                }
                other => panic!("{t}: {other:?}"),
            }
        }
        assert_eq!(
            characteristic_exponent(&Taper::FlatTop { width: 0.5 }, &s).unwrap(),
            CharacteristicExponent::InfiniteOrder
        );
    }

    #[test]
    fn exponent_rejects_bad_grid() {
        let s = ExponentSearch {
            grid: vec![0.1, 0.2, 0.05],
            ..Default::default()
        };
        assert!(characteristic_exponent(&Taper::Bartlett, &s).is_err());
    }

    #[test]
    fn block_orders() {
        let one = CharacteristicExponent::Finite { r: 1, w_r: 1.0 };
        let two = CharacteristicExponent::Finite { r: 2, w_r: 6.0 };
        assert_eq!(optimal_block_order(&one, 10_000, 1.0).unwrap(), 100);
        assert_eq!(optimal_block_order(&two, 10_000, 1.0).unwrap(), 10);
        let n = 5f64.exp().round() as usize;
        assert_eq!(
            optimal_block_order(&CharacteristicExponent::InfiniteOrder, n, 1.0).unwrap(),
            (n as f64).ln().ceil() as usize
        );
    }

    #[test]
    fn parse_specs() {
        assert_eq!(WeightScheme::parse("bartlett", 4).unwrap().weights(), &[0.75, 0.5, 0.25, 0.0]);
        assert_eq!(WeightScheme::parse("flattop:1", 3).unwrap().weights(), &[1.0, 1.0, 1.0]);
        assert_eq!(WeightScheme::parse("mbb", 4).unwrap().weights(), &[0.5; 4]);
        let e = WeightScheme::parse("1, 0.5,0.25", 99).unwrap();
        assert_eq!(e.ell(), 3);
        assert_eq!(e.source(), &WeightSource::Explicit);
        assert!(WeightScheme::parse("hann", 4).is_err());
        assert!(WeightScheme::parse("flattop:0", 4).is_err());
    }
}
