//! Beta distributions for elicited probabilities.
//!
//! An expert's (lower, mode, upper) judgment is turned into a beta
//! distribution whose mode equals the elicited mode and whose central
//! credible interval matches (lower, upper) as closely as possible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::{ln_beta, reg_inc_beta_with};

/// Search interval for the concentration `kappa = alpha + beta - 2`.
const LN_KAPPA_MIN: f64 = -4.605_170_185_988_091; // ln 0.01
const LN_KAPPA_MAX: f64 = 13.815_510_557_964_274; // ln 1e6
const KAPPA_SCAN_POINTS: usize = 81;
const GOLDEN_TOL: f64 = 1e-8;
const QUANTILE_MAX_ITERS: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistFitError {
    #[error("triplet must satisfy 0 <= lower < mode < upper <= 1, got ({lower}, {mode}, {upper})")]
    DegenerateTriplet { lower: f64, mode: f64, upper: f64 },
    #[error("concentration search did not bracket a minimum (best kappa {kappa} at the edge of the search range)")]
    NonConvergence { kappa: f64 },
    #[error("beta parameters must be positive and finite, got alpha={alpha}, beta={beta}")]
    InvalidParams { alpha: f64, beta: f64 },
    #[error("no beta distribution has mean {mean} and sd {sd}: need 0 < mean < 1 and sd^2 < mean(1-mean)")]
    InfeasibleMoments { mean: f64, sd: f64 },
    #[error("mode undefined for Beta({alpha}, {beta}); requires alpha > 1 and beta > 1")]
    ModeUndefined { alpha: f64, beta: f64 },
    #[error("credible level must lie in (0, 1), got {0}")]
    InvalidCiLevel(f64),
    #[error("density grid needs at least 2 points, got {0}")]
    GridTooSmall(usize),
}

/// One expert's (lower, mode, upper) judgment on the probability scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTriplet")]
pub struct ElicitedTriplet {
    lower: f64,
    mode: f64,
    upper: f64,
}

#[derive(Deserialize)]
struct RawTriplet {
    lower: f64,
    mode: f64,
    upper: f64,
}

impl TryFrom<RawTriplet> for ElicitedTriplet {
    type Error = DistFitError;

    fn try_from(raw: RawTriplet) -> Result<Self, Self::Error> {
        ElicitedTriplet::new(raw.lower, raw.mode, raw.upper)
    }
}

impl ElicitedTriplet {
    pub fn new(lower: f64, mode: f64, upper: f64) -> Result<Self, DistFitError> {
        let ordered = 0.0 <= lower && lower < mode && mode < upper && upper <= 1.0;
        if !ordered {
            return Err(DistFitError::DegenerateTriplet { lower, mode, upper });
        }
        Ok(Self { lower, mode, upper })
    }

    /// Builds a triplet from answers given as "patients out of 100".
    pub fn from_counts(lower: f64, mode: f64, upper: f64) -> Result<Self, DistFitError> {
        Self::new(lower / 100.0, mode / 100.0, upper / 100.0)
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn mode(&self) -> f64 {
        self.mode
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }
}

/// Central credible level the elicited (lower, upper) pair represents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CiLevel(f64);

impl CiLevel {
    pub fn new(level: f64) -> Result<Self, DistFitError> {
        if level > 0.0 && level < 1.0 {
            Ok(Self(level))
        } else {
            Err(DistFitError::InvalidCiLevel(level))
        }
    }

    pub fn level(&self) -> f64 {
        self.0
    }

    pub fn lower_tail(&self) -> f64 {
        0.5 * (1.0 - self.0)
    }

    pub fn upper_tail(&self) -> f64 {
        1.0 - self.lower_tail()
    }
}

impl Default for CiLevel {
    fn default() -> Self {
        Self(0.95)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBeta")]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
    #[serde(skip)]
    ln_b: f64,
}

#[derive(Deserialize)]
struct RawBeta {
    alpha: f64,
    beta: f64,
}

impl TryFrom<RawBeta> for BetaParams {
    type Error = DistFitError;

    fn try_from(raw: RawBeta) -> Result<Self, Self::Error> {
        BetaParams::new(raw.alpha, raw.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub mean: f64,
    pub sd: f64,
    /// `None` when the density has no interior mode (alpha <= 1 or beta <= 1).
    pub mode: Option<f64>,
    pub median: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, DistFitError> {
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
            return Err(DistFitError::InvalidParams { alpha, beta });
        }
        Ok(Self {
            alpha,
            beta,
            ln_b: ln_beta(alpha, beta),
        })
    }

    /// Exact inverse of the beta mean/sd formulas.
    pub fn from_moments(mean: f64, sd: f64) -> Result<Self, DistFitError> {
        let var = sd * sd;
        if !(mean > 0.0 && mean < 1.0 && sd > 0.0 && var < mean * (1.0 - mean)) {
            return Err(DistFitError::InfeasibleMoments { mean, sd });
        }
        let common = mean * (1.0 - mean) / var - 1.0;
        Self::new(mean * common, (1.0 - mean) * common)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn mode(&self) -> Result<f64, DistFitError> {
        if self.alpha <= 1.0 || self.beta <= 1.0 {
            return Err(DistFitError::ModeUndefined {
                alpha: self.alpha,
                beta: self.beta,
            });
        }
        Ok((self.alpha - 1.0) / (self.alpha + self.beta - 2.0))
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return f64::NEG_INFINITY;
        }
        let edge = |shape: f64, other: f64| {
            if shape < 1.0 {
                f64::INFINITY
            } else if shape > 1.0 {
                f64::NEG_INFINITY
            } else {
                // density at the edge is 1 / B(1, other) = other
                other.ln()
            }
        };
        if x == 0.0 {
            return edge(self.alpha, self.beta);
        }
        if x == 1.0 {
            return edge(self.beta, self.alpha);
        }
        (self.alpha - 1.0) * x.ln() + (self.beta - 1.0) * (-x).ln_1p() - self.ln_b
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        reg_inc_beta_with(self.alpha, self.beta, self.ln_b, x)
    }

    /// Inverse cdf by safeguarded Halley iteration from a closed-form
    /// starting guess.
    ///
    /// Every iterate is kept inside a shrinking bracket; a step that would
    /// leave the bracket is replaced by bisection.
    pub fn quantile(&self, q: f64) -> f64 {
        if q.is_nan() {
            return f64::NAN;
        }
        if q <= 0.0 {
            return 0.0;
        }
        if q >= 1.0 {
            return 1.0;
        }
        let (a, b) = (self.alpha, self.beta);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut x = self.initial_quantile(q);
        for _ in 0..QUANTILE_MAX_ITERS {
            let f = self.cdf(x) - q;
            if f == 0.0 {
                return x;
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let density = self.pdf(x);
            let mut next = 0.5 * (lo + hi);
            if density.is_finite() && density > 0.0 {
                let t = f / density;
                let curv = t * ((a - 1.0) / x - (b - 1.0) / (1.0 - x));
                let halley = x - t / (1.0 - 0.5 * curv.min(1.0));
                if halley > lo && halley < hi {
                    next = halley;
                }
            }
            if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) || hi - lo <= f64::MIN_POSITIVE {
                return next;
            }
            x = next;
        }
        x
    }

    /// Normal-approximation guess for the upper shape regime, tail power
    /// laws otherwise.
    fn initial_quantile(&self, q: f64) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        let x = if a >= 1.0 && b >= 1.0 {
            let pp = if q < 0.5 { q } else { 1.0 - q };
            let t = (-2.0 * pp.ln()).sqrt();
            let mut z = (2.30753 + t * 0.27061) / (1.0 + t * (0.99229 + t * 0.04481)) - t;
            if q < 0.5 {
                z = -z;
            }
            let al = (z * z - 3.0) / 6.0;
            let h = 2.0 / (1.0 / (2.0 * a - 1.0) + 1.0 / (2.0 * b - 1.0));
            let w = z * (al + h).sqrt() / h - (1.0 / (2.0 * b - 1.0) - 1.0 / (2.0 * a - 1.0)) * (al + 5.0 / 6.0 - 2.0 / (3.0 * h));
            a / (a + b * (2.0 * w).exp())
        } else {
            let ln_a = (a / (a + b)).ln();
            let ln_b = (b / (a + b)).ln();
            let t = (a * ln_a).exp() / a;
            let u = (b * ln_b).exp() / b;
            let w = t + u;
            if q < t / w {
                (a * w * q).powf(1.0 / a)
            } else {
                1.0 - (b * w * (1.0 - q)).powf(1.0 / b)
            }
        };
        if x.is_finite() && x > 0.0 && x < 1.0 {
            x
        } else {
            self.mean()
        }
    }

    pub fn summary(&self) -> BetaSummary {
        BetaSummary {
            mean: self.mean(),
            sd: self.sd(),
            mode: self.mode().ok(),
            median: self.quantile(0.5),
        }
    }

    /// `(x, pdf(x))` at `n_points` evenly spaced points covering [0, 1].
    pub fn density_grid(&self, n_points: usize) -> Result<Vec<(f64, f64)>, DistFitError> {
        if n_points < 2 {
            return Err(DistFitError::GridTooSmall(n_points));
        }
        let step = 1.0 / (n_points - 1) as f64;
        Ok((0..n_points)
            .map(|i| {
                let x = if i == n_points - 1 { 1.0 } else { i as f64 * step };
                (x, self.pdf(x))
            })
            .collect())
    }
}

pub fn beta_from_moments(mean: f64, sd: f64) -> Result<BetaParams, DistFitError> {
    BetaParams::from_moments(mean, sd)
}

/// Result of fitting a beta distribution to an elicited triplet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletFit {
    pub params: BetaParams,
    /// `alpha + beta - 2`
    pub kappa: f64,
    /// fitted lower-tail quantile minus the elicited lower value
    pub residual_lower: f64,
    /// fitted upper-tail quantile minus the elicited upper value
    pub residual_upper: f64,
    /// sum of squared residuals at the optimum
    pub objective: f64,
}

fn mode_anchored(mode: f64, kappa: f64) -> BetaParams {
    BetaParams::new(1.0 + mode * kappa, 1.0 + (1.0 - mode) * kappa)
        .expect("mode in (0,1) and kappa > 0 give valid shapes")
}

/// Fits a mode-anchored beta: `alpha = 1 + mode*kappa`, `beta = 1 + (1-mode)*kappa`,
/// with `kappa` minimizing the squared mismatch of the two tail quantiles.
pub fn fit_beta_from_triplet(t: &ElicitedTriplet, ci: CiLevel) -> Result<TripletFit, DistFitError> {
    // re-validate in case the triplet was built field by field elsewhere
    let t = ElicitedTriplet::new(t.lower, t.mode, t.upper)?;
    let (p_lo, p_hi) = (ci.lower_tail(), ci.upper_tail());
    let objective = |ln_kappa: f64| {
        let p = mode_anchored(t.mode, ln_kappa.exp());
        let r_lo = p.quantile(p_lo) - t.lower;
        let r_hi = p.quantile(p_hi) - t.upper;
        r_lo * r_lo + r_hi * r_hi
    };

    let step = (LN_KAPPA_MAX - LN_KAPPA_MIN) / (KAPPA_SCAN_POINTS - 1) as f64;
    let scan: Vec<f64> = (0..KAPPA_SCAN_POINTS)
        .map(|i| objective(LN_KAPPA_MIN + i as f64 * step))
        .collect();
    let best = scan
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if best == 0 || best == KAPPA_SCAN_POINTS - 1 {
        return Err(DistFitError::NonConvergence {
            kappa: (LN_KAPPA_MIN + best as f64 * step).exp(),
        });
    }

    let ln_kappa = golden_section(
        objective,
        LN_KAPPA_MIN + (best - 1) as f64 * step,
        LN_KAPPA_MIN + (best + 1) as f64 * step,
        GOLDEN_TOL,
    );
    let kappa = ln_kappa.exp();
    let params = mode_anchored(t.mode, kappa);
    let residual_lower = params.quantile(p_lo) - t.lower;
    let residual_upper = params.quantile(p_hi) - t.upper;
    Ok(TripletFit {
        params,
        kappa,
        residual_lower,
        residual_upper,
        objective: residual_lower * residual_lower + residual_upper * residual_upper,
    })
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_ordering_is_strict() {
        assert!(ElicitedTriplet::new(0.1, 0.1, 0.5).is_err());
        assert!(ElicitedTriplet::new(0.1, 0.5, 0.5).is_err());
        assert!(ElicitedTriplet::new(0.3, 0.2, 0.5).is_err());
        assert!(ElicitedTriplet::new(-0.1, 0.2, 0.5).is_err());
        assert!(ElicitedTriplet::new(0.1, 0.2, 1.01).is_err());
        assert!(ElicitedTriplet::new(0.0, 0.2, 1.0).is_ok());
    }

    #[test]
    fn counts_are_normalized() {
        let t = ElicitedTriplet::from_counts(1.0, 7.0, 40.0).unwrap();
        assert_eq!((t.lower(), t.mode(), t.upper()), (0.01, 0.07, 0.40));
    }

    #[test]
    fn triplet_deserialization_validates() {
        let bad = serde_json::from_str::<ElicitedTriplet>(r#"{"lower":0.5,"mode":0.4,"upper":0.9}"#);
        assert!(bad.is_err());
        let ok: ElicitedTriplet = serde_json::from_str(r#"{"lower":0.1,"mode":0.4,"upper":0.9}"#).unwrap();
        assert_eq!(ok.mode(), 0.4);
    }

    #[test]
    fn symmetric_triplet_gives_symmetric_beta() {
        let t = ElicitedTriplet::new(0.2, 0.5, 0.8).unwrap();
        let fit = fit_beta_from_triplet(&t, CiLevel::default()).unwrap();
        assert_eq!(fit.params.alpha(), fit.params.beta());
        assert!((fit.params.mean() - 0.5).abs() < 1e-15);
        assert!(fit.objective < 1e-12);
    }

    #[test]
    fn unbracketed_search_is_reported() {
        // the widest possible interval wants kappa -> 0
        let t = ElicitedTriplet::new(0.0, 0.5, 1.0).unwrap();
        assert!(matches!(
            fit_beta_from_triplet(&t, CiLevel::default()),
            Err(DistFitError::NonConvergence { .. })
        ));
    }

    #[test]
    fn imbalanced_triplet_returns_residuals() {
        // mode far from the interval centre: no beta matches both tails
        let t = ElicitedTriplet::new(0.05, 0.06, 0.9).unwrap();
        let fit = fit_beta_from_triplet(&t, CiLevel::default()).unwrap();
        assert!(fit.objective > 1e-4);
        assert!((fit.params.mode().unwrap() - 0.06).abs() < 1e-12);
    }

    #[test]
    fn moments_examples() {
        let p = beta_from_moments(0.0943, 0.0633).unwrap();
        assert!((p.alpha() - 1.916).abs() < 5e-3, "{}", p.alpha());
        assert!((p.beta() - 18.40).abs() < 5e-3, "{}", p.beta());

        let u = beta_from_moments(0.5, (1.0f64 / 12.0).sqrt()).unwrap();
        assert!((u.alpha() - 1.0).abs() < 1e-12 && (u.beta() - 1.0).abs() < 1e-12);

        assert!(matches!(
            beta_from_moments(0.5, 0.5),
            Err(DistFitError::InfeasibleMoments { .. })
        ));
        assert!(beta_from_moments(0.0, 0.1).is_err());
    }

    #[test]
    fn quantile_trivial_cases() {
        let u = BetaParams::new(1.0, 1.0).unwrap();
        assert!((u.quantile(0.5) - 0.5).abs() < 1e-15);
        let s = BetaParams::new(2.0, 2.0).unwrap();
        assert!((s.quantile(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(s.quantile(0.0), 0.0);
        assert_eq!(s.quantile(1.0), 1.0);
    }

    #[test]
    fn summary_cases() {
        let u = BetaParams::new(1.0, 1.0).unwrap().summary();
        assert!((u.mean - 0.5).abs() < 1e-15);
        assert!((u.sd - (1.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert!(u.mode.is_none());
        assert!(matches!(
            BetaParams::new(1.0, 1.0).unwrap().mode(),
            Err(DistFitError::ModeUndefined { .. })
        ));

        let e1 = BetaParams::new(1.916, 18.40).unwrap().summary();
        assert!((e1.mean - 0.0943).abs() < 1e-4);
        assert!((e1.sd - 0.0633).abs() < 1e-4);

        assert!((BetaParams::new(2.0, 2.0).unwrap().summary().median - 0.5).abs() < 1e-15);
    }

    #[test]
    fn density_grid_cases() {
        let u = BetaParams::new(1.0, 1.0).unwrap().density_grid(3).unwrap();
        assert_eq!(u, vec![(0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]);
        let s = BetaParams::new(2.0, 2.0).unwrap().density_grid(3).unwrap();
        assert_eq!(s[0], (0.0, 0.0));
        assert!((s[1].1 - 1.5).abs() < 1e-14);
        assert_eq!(s[2], (1.0, 0.0));
        assert!(matches!(
            BetaParams::new(2.0, 2.0).unwrap().density_grid(1),
            Err(DistFitError::GridTooSmall(1))
        ));
    }

    #[test]
    fn params_validation() {
        assert!(BetaParams::new(0.0, 1.0).is_err());
        assert!(BetaParams::new(1.0, f64::NAN).is_err());
        assert!(serde_json::from_str::<BetaParams>(r#"{"alpha":-1,"beta":2}"#).is_err());
        let p: BetaParams = serde_json::from_str(r#"{"alpha":2.5,"beta":7}"#).unwrap();
        assert!((p.cdf(0.3) - BetaParams::new(2.5, 7.0).unwrap().cdf(0.3)).abs() == 0.0);
    }
}
