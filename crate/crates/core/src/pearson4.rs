//! Pearson type IV distribution.
//!
//! Density `k [1 + z^2]^(-m) exp(-nu atan z)` with `z = (x - lambda) / a`.
//! Integrals are taken after the substitution `x = lambda + a tan(theta)`,
//! which maps the real line onto `(-pi/2, pi/2)` and turns the density into
//! `k a cos(theta)^(2m-2) exp(-nu theta)`.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad::integrate;
use crate::special::{ln_beta, ln_gamma, ln_gamma_complex};

pub const MIN_FIT_SAMPLES: usize = 10_000;

/// Envelope acceptance below this makes rejection sampling impractical.
const MIN_ACCEPTANCE: f64 = 1e-4;
/// Distance from the normal-kurtosis boundary, in standard errors of the
/// sample kurtosis, required before samples count as heavy-tailed.
const KURTOSIS_MARGIN_SE: f64 = 3.0;
const CDF_TOL: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PearsonError {
    #[error("invalid Pearson IV parameters: {0}")]
    InvalidParams(String),
    #[error("normalizing constant is not representable for m = {m}, nu = {nu}")]
    NormalizationOverflow { m: f64, nu: f64 },
    #[error("no usable Student-t envelope for m = {m}, nu = {nu}")]
    EnvelopeInvalid { m: f64, nu: f64 },
    #[error("sample moments (beta1 = {beta1}, beta2 = {beta2}) are outside the type IV region")]
    OutsideTypeIVRegion { beta1: f64, beta2: f64 },
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct PearsonIV {
    m: f64,
    nu: f64,
    lambda: f64,
    a: f64,
    ln_k: f64,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    m: f64,
    nu: f64,
    lambda: f64,
    a: f64,
}

impl TryFrom<RawParams> for PearsonIV {
    type Error = PearsonError;

    fn try_from(r: RawParams) -> Result<Self, Self::Error> {
        PearsonIV::new(r.m, r.nu, r.lambda, r.a)
    }
}

impl From<PearsonIV> for RawParams {
    fn from(p: PearsonIV) -> Self {
        RawParams { m: p.m, nu: p.nu, lambda: p.lambda, a: p.a }
    }
}

/// Sample mean, variance, signed skewness and kurtosis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl SampleMoments {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &x in xs {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
        SampleMoments {
            mean,
            variance: m2,
            skewness: m3 / m2.powf(1.5),
            kurtosis: m4 / (m2 * m2),
        }
    }
}

impl PearsonIV {
    pub fn new(m: f64, nu: f64, lambda: f64, a: f64) -> Result<Self, PearsonError> {
        if !(m.is_finite() && nu.is_finite() && lambda.is_finite() && a.is_finite()) {
            return Err(PearsonError::InvalidParams("parameters must be finite".into()));
        }
        if m <= 0.5 {
            return Err(PearsonError::InvalidParams(format!("m must exceed 1/2, got {m}")));
        }
        if a <= 0.0 {
            return Err(PearsonError::InvalidParams(format!("scale must be positive, got {a}")));
        }
        let ln_k = ln_normalizer(m, nu, a);
        if !ln_k.is_finite() || !ln_k.exp().is_finite() || ln_k.exp() == 0.0 {
            return Err(PearsonError::NormalizationOverflow { m, nu });
        }
        Ok(Self { m, nu, lambda, a, ln_k })
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.lambda) / self.a;
        self.ln_k - self.m * z.mul_add(z, 1.0).ln() - self.nu * z.atan()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    /// Density of `theta = atan((x - lambda) / a)`.
    fn theta_density(&self, theta: f64) -> f64 {
        let c = theta.cos();
        if c <= 0.0 {
            return if self.m > 1.0 { 0.0 } else { f64::INFINITY };
        }
        (self.ln_k + self.a.ln() + (2.0 * self.m - 2.0) * c.ln() - self.nu * theta).exp()
    }

    /// Peak of the angle density (the interval midpoint's side when m <= 1).
    fn theta_split(&self) -> f64 {
        if self.m > 1.0 {
            (-self.nu / (2.0 * self.m - 2.0)).atan()
        } else {
            0.0
        }
    }

    fn cdf_theta(&self, theta: f64) -> f64 {
        if theta <= -FRAC_PI_2 {
            return 0.0;
        }
        if theta >= FRAC_PI_2 {
            return 1.0;
        }
        let f = |t: f64| self.theta_density(t);
        let v = if theta <= self.theta_split() {
            integrate(f, -FRAC_PI_2, theta, CDF_TOL)
        } else {
            1.0 - integrate(f, theta, FRAC_PI_2, CDF_TOL)
        };
        v.clamp(0.0, 1.0)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        if x == f64::INFINITY {
            return 1.0;
        }
        self.cdf_theta(((x - self.lambda) / self.a).atan())
    }

    /// Inverse cdf by safeguarded Newton in the angle domain. Each step only
    /// integrates the density between consecutive iterates.
    pub fn quantile(&self, q: f64) -> f64 {
        if q.is_nan() {
            return f64::NAN;
        }
        if q <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if q >= 1.0 {
            return f64::INFINITY;
        }
        let f = |t: f64| self.theta_density(t);
        let (mut lo, mut hi) = (-FRAC_PI_2, FRAC_PI_2);
        let mut theta = self.theta_split();
        let mut cdf = self.cdf_theta(theta);
        for _ in 0..200 {
            let err = cdf - q;
            if err.abs() < 1e-15 {
                break;
            }
            if err < 0.0 {
                lo = theta;
            } else {
                hi = theta;
            }
            let dens = f(theta);
            let newton = theta - err / dens;
            let next = if dens.is_finite() && dens > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (next - theta).abs() < 1e-15 {
                theta = next;
                break;
            }
            cdf = (cdf + integrate(f, theta, next, CDF_TOL)).clamp(0.0, 1.0);
            theta = next;
        }
        self.lambda + self.a * theta.tan()
    }

    /// Exists only for m > 1.
    pub fn mean(&self) -> Option<f64> {
        (self.m > 1.0).then(|| self.lambda - self.a * self.nu / (2.0 * self.m - 2.0))
    }

    /// Exists only for m > 3/2.
    pub fn variance(&self) -> Option<f64> {
        (self.m > 1.5).then(|| {
            let r = 2.0 * self.m - 2.0;
            self.a * self.a * (r * r + self.nu * self.nu) / (r * r * (r - 1.0))
        })
    }

    /// Log of the rejection bound for the Student-t envelope with
    /// df = 2m - 1 and scale a / sqrt(df).
    fn ln_envelope_bound(&self) -> f64 {
        let half_nu = Complex64::new(self.m, 0.5 * self.nu);
        2.0 * (ln_gamma_complex(half_nu).re - ln_gamma(self.m)) + self.nu.abs() * FRAC_PI_2
    }

    /// Expected fraction of envelope proposals that are accepted.
    pub fn acceptance_rate(&self) -> f64 {
        (-self.ln_envelope_bound()).exp()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>, PearsonError> {
        self.sample_with(&mut ChaCha8Rng::seed_from_u64(seed), n)
    }

    /// Rejection sampling. The envelope shares the `(1 + z^2)^(-m)` factor,
    /// so a proposal is kept with probability `exp(-nu atan z - |nu| pi/2)`.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<f64>, PearsonError> {
        let df = 2.0 * self.m - 1.0;
        let invalid = PearsonError::EnvelopeInvalid { m: self.m, nu: self.nu };
        if !(df > 0.0) || self.acceptance_rate() < MIN_ACCEPTANCE {
            return Err(invalid);
        }
        let t = StudentT::new(df).map_err(|_| invalid)?;
        let scale = df.sqrt().recip();
        let shift = self.nu.abs() * FRAC_PI_2;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let z = t.sample(rng) * scale;
            let u: f64 = rng.random();
            if u.ln() < -self.nu * z.atan() - shift {
                out.push(self.lambda + self.a * z);
            }
        }
        Ok(out)
    }

    /// Method-of-moments fit through the Pearson system.
    pub fn fit_moments(samples: &[f64]) -> Result<Self, PearsonError> {
        if samples.len() < MIN_FIT_SAMPLES {
            return Err(PearsonError::TooFewSamples { got: samples.len(), min: MIN_FIT_SAMPLES });
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(PearsonError::InvalidParams("samples must be finite".into()));
        }
        Self::from_moments(&SampleMoments::from_samples(samples), samples.len())
    }

    /// Inverts the Pearson system from four moments estimated on `n` draws.
    pub fn from_moments(mo: &SampleMoments, n: usize) -> Result<Self, PearsonError> {
        let skew = mo.skewness;
        let beta1 = skew * skew;
        let beta2 = mo.kurtosis;
        let outside = PearsonError::OutsideTypeIVRegion { beta1, beta2 };
        if !(mo.variance > 0.0) || !beta2.is_finite() {
            return Err(outside);
        }
        // Samples whose kurtosis is within noise of the normal boundary are
        // not evidence of type IV tails.
        let denom = 2.0 * beta2 - 3.0 * beta1 - 6.0;
        let noise = 2.0 * (24.0 / n.max(1) as f64).sqrt();
        if denom <= KURTOSIS_MARGIN_SE * noise {
            return Err(outside);
        }
        let selector = beta1 * (beta2 + 3.0).powi(2) / (4.0 * (4.0 * beta2 - 3.0 * beta1) * denom);
        if !(0.0..1.0).contains(&selector) {
            return Err(outside);
        }
        let r = 6.0 * (beta2 - beta1 - 1.0) / denom;
        let disc = 16.0 * (r - 1.0) - beta1 * (r - 2.0).powi(2);
        if !(disc > 0.0) {
            return Err(outside);
        }
        let sd = mo.variance.sqrt();
        let m = 1.0 + 0.5 * r;
        let nu = -r * (r - 2.0) * skew / disc.sqrt();
        let a = sd * disc.sqrt() / 4.0;
        let lambda = mo.mean - (r - 2.0) * skew * sd / 4.0;
        PearsonIV::new(m, nu, lambda, a)
    }
}

/// ln k = 2 [Re ln Gamma(m + i nu/2) - ln Gamma(m)] - ln a - ln B(m - 1/2, 1/2)
fn ln_normalizer(m: f64, nu: f64, a: f64) -> f64 {
    let g = ln_gamma_complex(Complex64::new(m, 0.5 * nu)).re;
    2.0 * (g - ln_gamma(m)) - a.ln() - ln_beta(m - 0.5, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(m: f64, nu: f64, lambda: f64, a: f64) -> PearsonIV {
        PearsonIV::new(m, nu, lambda, a).unwrap()
    }

    #[test]
    fn rejects_bad_params() {
        assert!(PearsonIV::new(0.5, 0.0, 0.0, 1.0).is_err());
        assert!(PearsonIV::new(2.0, 0.0, 0.0, 0.0).is_err());
        assert!(PearsonIV::new(2.0, f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn symmetric_when_nu_zero() {
        let d = p(2.5, 0.0, 0.3, 0.7);
        for &x in &[0.01, 0.4, 1.3, 9.0] {
            assert!((d.pdf(0.3 + x) - d.pdf(0.3 - x)).abs() < 1e-15);
        }
        assert!((d.cdf(0.3) - 0.5).abs() < 1e-12);
        assert!((d.quantile(0.5) - 0.3).abs() < 1e-10);
    }

    #[test]
    fn cauchy_special_case() {
        // m = 1, nu = 0 is the Cauchy distribution
        let d = p(1.0, 0.0, 0.0, 1.0);
        assert!((d.pdf(0.0) - std::f64::consts::FRAC_1_PI).abs() < 1e-12);
        assert!((d.cdf(1.0) - 0.75).abs() < 1e-12);
        assert!((d.quantile(0.75) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn moments_exist_only_with_enough_tail() {
        assert!(p(1.0, 0.2, 0.0, 1.0).mean().is_none());
        assert!(p(1.4, 0.2, 0.0, 1.0).variance().is_none());
        assert!(p(1.6, 0.2, 0.0, 1.0).variance().is_some());
        assert_eq!(p(3.0, 1.0, 0.0, 1.0).mean(), Some(-0.25));
    }

    #[test]
    fn quantile_inverts_cdf() {
        let d = p(1.91, -0.36, 0.01, 0.08);
        for &q in &[1e-6, 0.025, 0.3, 0.5, 0.9, 0.999_999] {
            assert!((d.cdf(d.quantile(q)) - q).abs() < 1e-11, "q = {q}");
        }
    }

    #[test]
    fn json_shape() {
        let d = p(1.91, -0.36, 0.01, 0.08);
        let v = serde_json::to_value(d).unwrap();
        assert_eq!(v, serde_json::json!({"m": 1.91, "nu": -0.36, "lambda": 0.01, "a": 0.08}));
        assert_eq!(serde_json::from_value::<PearsonIV>(v).unwrap(), d);
        assert!(serde_json::from_str::<PearsonIV>(r#"{"m":0.2,"nu":0,"lambda":0,"a":1}"#).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let d = p(1.91, -0.36, 0.01, 0.08);
        assert_eq!(d.sample(100, 9).unwrap(), d.sample(100, 9).unwrap());
        assert_ne!(d.sample(100, 9).unwrap(), d.sample(100, 10).unwrap());
        assert!(d.acceptance_rate() > 0.1);
    }

    #[test]
    fn fit_needs_enough_heavy_tailed_samples() {
        assert!(matches!(
            PearsonIV::fit_moments(&[0.0; 10]),
            Err(PearsonError::TooFewSamples { .. })
        ));
        let near_normal = SampleMoments { mean: 0.0, variance: 1.0, skewness: 0.001, kurtosis: 3.001 };
        assert!(matches!(
            PearsonIV::from_moments(&near_normal, 1_000_000),
            Err(PearsonError::OutsideTypeIVRegion { .. })
        ));
    }

    #[test]
    fn moment_inversion_is_exact_on_population_moments() {
        // population moments of a known distribution map back to it
        let d = p(6.0, -1.5, 0.2, 2.0);
        let (m, nu, a) = (d.m(), d.nu(), d.a());
        let r = 2.0 * m - 2.0;
        let mean = d.mean().unwrap();
        let variance = d.variance().unwrap();
        let skewness = -4.0 * nu / (r - 2.0) * ((r - 1.0) / (r * r + nu * nu)).sqrt();
        let beta1 = skewness * skewness;
        let kurtosis = (3.0 * beta1 * (r - 2.0) + 6.0 * (r - 1.0)) / (2.0 * (r - 3.0));
        let mo = SampleMoments { mean, variance, skewness, kurtosis };
        let back = PearsonIV::from_moments(&mo, usize::MAX).unwrap();
        assert!((back.m() - m).abs() < 1e-9);
        assert!((back.nu() - nu).abs() < 1e-9);
        assert!((back.a() - a).abs() < 1e-9);
        assert!((back.lambda() - d.lambda()).abs() < 1e-9);
    }
}
