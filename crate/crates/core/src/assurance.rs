//! Assurance-based sample size search for a two-arm binomial
//! non-inferiority trial.
//!
//! Each simulated trial draws its true `(p1, p2)` from a prior sample set,
//! generates binomial counts, and is analysed with a deterministic grid
//! posterior over `(p1, delta)`. Non-inferiority is declared when the
//! posterior puts enough mass below the margin.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{PriorDraw, PriorSampleSet};
use crate::distfit::{beta_from_moments, BetaParams, DistFitError};
use crate::pearson4::{PearsonError, PearsonIV};
use crate::special::reg_inc_beta;

/// Clamp applied to the second-arm probability on the grid and in the null
/// scenario.
pub const PROB_EPS: f64 = 1e-9;
pub const DEFAULT_GRID: usize = 400;
const P1_UPPER_QUANTILE: f64 = 0.999;
const DELTA_TAIL: f64 = 0.0005;

#[derive(Debug, Error)]
pub enum AssuranceError {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("counts ({y1}, {y2}) exceed {n} per arm")]
    InvalidCounts { y1: u64, y2: u64, n: u64 },
    #[error("grid too small: {0} points per axis, need at least 2")]
    GridTooSmall(usize),
    #[error("every grid cell has zero posterior weight (max log-likelihood {max_log_lik})")]
    GridUnderflow { max_log_lik: f64 },
    #[error("prior sample set has {have} rows but {need} simulations were requested")]
    TooFewPriorRows { have: usize, need: usize },
    #[error("no sample size in the range meets the targets")]
    TargetUnreachable { curve: Vec<AssuranceResult> },
    #[error(transparent)]
    Beta(#[from] DistFitError),
    #[error(transparent)]
    Pearson(#[from] PearsonError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the posterior is turned into a non-inferiority declaration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    /// P(delta < margin | data) >= threshold.
    #[default]
    PosteriorProbability,
    /// The posterior `threshold` quantile of delta lies below the margin.
    UpperCredibleLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_p1: usize,
    pub n_delta: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n_p1: DEFAULT_GRID, n_delta: DEFAULT_GRID }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialDesign {
    pub margin: f64,
    /// Total over both arms, allocated 1:1.
    pub n_total: u64,
    pub sims: usize,
    pub decision_threshold: f64,
    pub seed: u64,
    #[serde(default)]
    pub rule: DecisionRule,
    #[serde(default)]
    pub grid: GridSpec,
}

impl TrialDesign {
    pub fn new(margin: f64, n_total: u64, sims: usize, decision_threshold: f64, seed: u64) -> Result<Self, AssuranceError> {
        let d = Self { margin, n_total, sims, decision_threshold, seed, rule: DecisionRule::default(), grid: GridSpec::default() };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), AssuranceError> {
        let bad = |m: String| Err(AssuranceError::InvalidDesign(m));
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return bad(format!("margin {} outside (0, 1]", self.margin));
        }
        if self.n_total == 0 || self.n_total % 2 != 0 {
            return bad(format!("n_total {} must be even and positive", self.n_total));
        }
        if self.sims == 0 {
            return bad("sims must be positive".into());
        }
        if !(self.decision_threshold > 0.5 && self.decision_threshold < 1.0) {
            return bad(format!("decision threshold {} outside (0.5, 1)", self.decision_threshold));
        }
        if self.grid.n_p1 < 2 || self.grid.n_delta < 2 {
            return Err(AssuranceError::GridTooSmall(self.grid.n_p1.min(self.grid.n_delta)));
        }
        Ok(())
    }

    pub fn n_per_arm(&self) -> u64 {
        self.n_total / 2
    }
}

/// Prior used when analysing each simulated trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisPrior {
    pub p1_marginal: BetaParams,
    pub delta_prior: PearsonIV,
}

impl AnalysisPrior {
    /// Beta moment-matched to the p1 column and Pearson IV fitted to the
    /// delta column.
    pub fn from_samples(s: &PriorSampleSet) -> Result<Self, AssuranceError> {
        let p1: Vec<f64> = s.rows.iter().map(|r| r.p1).collect();
        let n = p1.len() as f64;
        let mean = p1.iter().sum::<f64>() / n;
        let sd = (p1.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let delta: Vec<f64> = s.rows.iter().map(|r| r.delta).collect();
        Ok(Self { p1_marginal: beta_from_moments(mean, sd)?, delta_prior: PearsonIV::fit_moments(&delta)? })
    }
}

// ----------------------------------------------------------------- simulation

/// Smallest y with P(Y <= y) >= u for Y ~ Binomial(n, p).
pub fn binomial_quantile(n: u64, p: f64, u: f64) -> u64 {
    if p <= 0.0 || n == 0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    // P(Y <= y) = I_{1-p}(n - y, y + 1)
    let cdf = |y: u64| if y >= n { 1.0 } else { reg_inc_beta((n - y) as f64, y as f64 + 1.0, 1.0 - p) };
    let (nf, sd) = (n as f64, (n as f64 * p * (1.0 - p)).sqrt());
    let guess = (nf * p).round();
    // bracket around the normal guess, widening until it holds
    let mut width = 8.0 * sd + 2.0;
    let (mut lo, mut hi) = loop {
        let lo = (guess - width).max(-1.0);
        let hi = (guess + width).min(nf);
        let lo_ok = lo < 0.0 || cdf(lo as u64) < u;
        let hi_ok = cdf(hi as u64) >= u;
        if lo_ok && hi_ok {
            break (lo as i64, hi as i64);
        }
        width *= 2.0;
    };
    // invariant: cdf(lo) < u <= cdf(hi), with cdf(-1) = 0
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if cdf(mid as u64) >= u {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi as u64
}

fn trial_uniforms(seed: u64, s: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    (rng.random(), rng.random())
}

/// Binomial counts for both arms. Each arm consumes one uniform through the
/// binomial quantile, so counts move monotonically with `p` and `n` for a
/// fixed seed.
pub fn simulate_trial(p1: f64, p2: f64, n_per_arm: u64, seed: u64) -> (u64, u64) {
    simulate_stream(p1, p2, n_per_arm, seed, 0)
}

fn simulate_stream(p1: f64, p2: f64, n: u64, seed: u64, s: u64) -> (u64, u64) {
    let (u1, u2) = trial_uniforms(seed, s);
    (binomial_quantile(n, p1, u1), binomial_quantile(n, p2, u2))
}

// ---------------------------------------------------------- grid posterior

/// Data-independent tables for the grid posterior under one analysis prior.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    p1: Vec<f64>,
    delta: Vec<f64>,
    delta_step: f64,
    ln_p1: Vec<f64>,
    ln_q1: Vec<f64>,
    /// Row-major `[i * n_delta + k]`.
    ln_prior: Vec<f64>,
    ln_p2: Vec<f64>,
    ln_q2: Vec<f64>,
}

/// Posterior marginal of delta on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaPosterior {
    /// Cell centers.
    pub delta: Vec<f64>,
    /// Normalized cell masses.
    pub mass: Vec<f64>,
    step: f64,
}

impl DeltaPosterior {
    /// P(delta < x), linear in x within each cell.
    pub fn cdf(&self, x: f64) -> f64 {
        let left0 = self.delta[0] - 0.5 * self.step;
        let pos = (x - left0) / self.step;
        if pos <= 0.0 {
            return 0.0;
        }
        let full = pos.floor() as usize;
        if full >= self.mass.len() {
            return 1.0;
        }
        let below: f64 = self.mass[..full].iter().sum();
        (below + (pos - full as f64) * self.mass[full]).min(1.0)
    }

    /// Inverse of `cdf`.
    pub fn quantile(&self, q: f64) -> f64 {
        let left0 = self.delta[0] - 0.5 * self.step;
        let mut acc = 0.0;
        for (k, &m) in self.mass.iter().enumerate() {
            if m > 0.0 && acc + m >= q {
                return left0 + self.step * (k as f64 + ((q - acc) / m).clamp(0.0, 1.0));
            }
            acc += m;
        }
        left0 + self.step * self.mass.len() as f64
    }
}

impl PosteriorGrid {
    /// Midpoint grid over p1 in (0, q_0.999) of the p1 prior and delta over
    /// the central 99.9% of the delta prior.
    pub fn new(prior: &AnalysisPrior, spec: GridSpec) -> Result<Self, AssuranceError> {
        if spec.n_p1 < 2 || spec.n_delta < 2 {
            return Err(AssuranceError::GridTooSmall(spec.n_p1.min(spec.n_delta)));
        }
        let p1_hi = prior.p1_marginal.quantile(P1_UPPER_QUANTILE);
        let d_lo = prior.delta_prior.quantile(DELTA_TAIL);
        let d_hi = prior.delta_prior.quantile(1.0 - DELTA_TAIL);
        let h1 = p1_hi / spec.n_p1 as f64;
        let hd = (d_hi - d_lo) / spec.n_delta as f64;
        let p1: Vec<f64> = (0..spec.n_p1).map(|i| (i as f64 + 0.5) * h1).collect();
        let delta: Vec<f64> = (0..spec.n_delta).map(|k| d_lo + (k as f64 + 0.5) * hd).collect();
        let ln_prior_d: Vec<f64> = delta.iter().map(|&d| prior.delta_prior.ln_pdf(d)).collect();
        let cells = spec.n_p1 * spec.n_delta;
        let (mut ln_prior, mut ln_p2, mut ln_q2) = (Vec::with_capacity(cells), Vec::with_capacity(cells), Vec::with_capacity(cells));
        for &a in &p1 {
            let lp = prior.p1_marginal.ln_pdf(a);
            for (k, &d) in delta.iter().enumerate() {
                let p2 = (a + d).clamp(PROB_EPS, 1.0 - PROB_EPS);
                ln_prior.push(lp + ln_prior_d[k]);
                ln_p2.push(p2.ln());
                ln_q2.push((-p2).ln_1p());
            }
        }
        Ok(Self {
            ln_p1: p1.iter().map(|p| p.ln()).collect(),
            ln_q1: p1.iter().map(|p| (-p).ln_1p()).collect(),
            p1,
            delta,
            delta_step: hd,
            ln_prior,
            ln_p2,
            ln_q2,
        })
    }

    pub fn p1_points(&self) -> &[f64] {
        &self.p1
    }

    pub fn delta_points(&self) -> &[f64] {
        &self.delta
    }

    pub fn delta_posterior(&self, y1: u64, y2: u64, n: u64) -> Result<DeltaPosterior, AssuranceError> {
        if y1 > n || y2 > n {
            return Err(AssuranceError::InvalidCounts { y1, y2, n });
        }
        let nd = self.delta.len();
        let (y1f, f1, y2f, f2) = (y1 as f64, (n - y1) as f64, y2 as f64, (n - y2) as f64);
        // y ln p is 0 when y is 0, even where ln p is -inf
        let term = |y: f64, l: f64| if y == 0.0 { 0.0 } else { y * l };
        let mut lp = vec![0.0; self.ln_prior.len()];
        let mut max_post = f64::NEG_INFINITY;
        let mut max_lik = f64::NEG_INFINITY;
        for i in 0..self.p1.len() {
            let a = term(y1f, self.ln_p1[i]) + term(f1, self.ln_q1[i]);
            for k in 0..nd {
                let c = i * nd + k;
                let lik = a + term(y2f, self.ln_p2[c]) + term(f2, self.ln_q2[c]);
                let v = lik + self.ln_prior[c];
                lp[c] = v;
                if lik > max_lik {
                    max_lik = lik;
                }
                if v > max_post {
                    max_post = v;
                }
            }
        }
        if !max_post.is_finite() {
            return Err(AssuranceError::GridUnderflow { max_log_lik: max_lik });
        }
        let mut mass = vec![0.0; nd];
        for i in 0..self.p1.len() {
            for k in 0..nd {
                mass[k] += (lp[i * nd + k] - max_post).exp();
            }
        }
        let total: f64 = mass.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(AssuranceError::GridUnderflow { max_log_lik: max_lik });
        }
        mass.iter_mut().for_each(|m| *m /= total);
        Ok(DeltaPosterior { delta: self.delta.clone(), mass, step: self.delta_step })
    }

    /// P(delta < margin | y1, y2).
    pub fn ni_posterior_prob(&self, y1: u64, y2: u64, n: u64, margin: f64) -> Result<f64, AssuranceError> {
        Ok(self.delta_posterior(y1, y2, n)?.cdf(margin))
    }

    fn declares_ni(&self, y1: u64, y2: u64, n: u64, margin: f64, threshold: f64, rule: DecisionRule) -> Result<bool, AssuranceError> {
        let post = self.delta_posterior(y1, y2, n)?;
        Ok(match rule {
            DecisionRule::PosteriorProbability => post.cdf(margin) >= threshold,
            DecisionRule::UpperCredibleLimit => post.quantile(threshold) < margin,
        })
    }
}

/// One-off grid posterior probability that delta lies below the margin.
pub fn ni_posterior_prob(
    y1: u64,
    y2: u64,
    n_per_arm: u64,
    prior: &AnalysisPrior,
    margin: f64,
    grid: GridSpec,
) -> Result<f64, AssuranceError> {
    PosteriorGrid::new(prior, grid)?.ni_posterior_prob(y1, y2, n_per_arm, margin)
}

// ------------------------------------------------------------------ assurance

/// Fraction of prior rows with delta below the margin: the large-sample
/// limit of assurance.
pub fn max_assurance(rows: &[PriorDraw], margin: f64) -> f64 {
    if rows.is_empty() {
        return f64::NAN;
    }
    rows.iter().filter(|r| r.delta < margin).count() as f64 / rows.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssuranceResult {
    pub n_total: u64,
    pub assurance: f64,
    pub null_assurance: f64,
    pub max_assurance: f64,
    pub relative_assurance: f64,
    /// Monte Carlo standard error of `assurance`.
    pub mc_se: f64,
    /// Monte Carlo standard error of `null_assurance`.
    pub null_mc_se: f64,
    /// Some null-scenario draw had p1 + margin clamped below 1.
    pub null_clamped: bool,
}

fn mc_se(p: f64, sims: usize) -> f64 {
    (p * (1.0 - p) / sims as f64).sqrt()
}

/// Assurance under the prior rows and under the null scenario in which the
/// second arm sits exactly at p1 + margin. Simulation `s` uses row `s` and
/// its own random stream, so results do not depend on `n_total` beyond the
/// counts themselves. The maximum assurance is counted over the same rows.
pub fn assurance(design: &TrialDesign, prior_samples: &PriorSampleSet, prior: &AnalysisPrior) -> Result<AssuranceResult, AssuranceError> {
    design.validate()?;
    let grid = PosteriorGrid::new(prior, design.grid)?;
    assurance_on_grid(design, prior_samples, &grid)
}

fn assurance_on_grid(design: &TrialDesign, prior_samples: &PriorSampleSet, grid: &PosteriorGrid) -> Result<AssuranceResult, AssuranceError> {
    design.validate()?;
    if prior_samples.rows.len() < design.sims {
        return Err(AssuranceError::TooFewPriorRows { have: prior_samples.rows.len(), need: design.sims });
    }
    let rows = &prior_samples.rows[..design.sims];
    let n = design.n_per_arm();
    let outcomes = rows
        .par_iter()
        .enumerate()
        .map(|(s, row)| -> Result<(bool, bool, bool), AssuranceError> {
            let decide = |y1, y2| grid.declares_ni(y1, y2, n, design.margin, design.decision_threshold, design.rule);
            let (y1, y2) = simulate_stream(row.p1, row.p2, n, design.seed, s as u64);
            let raw_null = row.p1 + design.margin;
            let p2_null = raw_null.min(1.0 - PROB_EPS);
            let (z1, z2) = simulate_stream(row.p1, p2_null, n, design.seed, s as u64);
            Ok((decide(y1, y2)?, decide(z1, z2)?, raw_null > 1.0 - PROB_EPS))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sims = design.sims as f64;
    let a = outcomes.iter().filter(|o| o.0).count() as f64 / sims;
    let a0 = outcomes.iter().filter(|o| o.1).count() as f64 / sims;
    let max = max_assurance(rows, design.margin);
    Ok(AssuranceResult {
        n_total: design.n_total,
        assurance: a,
        null_assurance: a0,
        max_assurance: max,
        relative_assurance: if max > 0.0 { a / max } else { 0.0 },
        mc_se: mc_se(a, design.sims),
        null_mc_se: mc_se(a0, design.sims),
        null_clamped: outcomes.iter().any(|o| o.2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchTargets {
    pub rel_target: f64,
    pub null_cap: f64,
    /// Null-scenario Monte Carlo standard errors tolerated above `null_cap`.
    #[serde(default)]
    pub null_se_allowance: f64,
    pub n_min: u64,
    pub n_max: u64,
    pub n_step: u64,
}

impl Default for SearchTargets {
    fn default() -> Self {
        Self { rel_target: 0.80, null_cap: 0.05, null_se_allowance: 0.0, n_min: 500, n_max: 4000, n_step: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeChoice {
    pub chosen: AssuranceResult,
    pub curve: Vec<AssuranceResult>,
}

/// Scans `n_min, n_min + n_step, ..., <= n_max` and returns the first total
/// size meeting both targets, with the curve evaluated up to that point.
pub fn find_sample_size(
    template: &TrialDesign,
    prior_samples: &PriorSampleSet,
    prior: &AnalysisPrior,
    targets: SearchTargets,
) -> Result<SampleSizeChoice, AssuranceError> {
    if targets.n_step == 0 || targets.n_min == 0 || targets.n_min > targets.n_max {
        return Err(AssuranceError::InvalidDesign(format!(
            "empty sample size range {}..={} step {}",
            targets.n_min, targets.n_max, targets.n_step
        )));
    }
    if targets.n_min % 2 != 0 || targets.n_step % 2 != 0 {
        return Err(AssuranceError::InvalidDesign("n_min and n_step must be even".into()));
    }
    let grid = PosteriorGrid::new(prior, template.grid)?;
    let mut curve = Vec::new();
    let mut n = targets.n_min;
    while n <= targets.n_max {
        let design = TrialDesign { n_total: n, ..*template };
        let r = assurance_on_grid(&design, prior_samples, &grid)?;
        curve.push(r);
        if r.relative_assurance >= targets.rel_target
            && r.null_assurance <= targets.null_cap + targets.null_se_allowance * r.null_mc_se
        {
            return Ok(SampleSizeChoice { chosen: r, curve });
        }
        n += targets.n_step;
    }
    Err(AssuranceError::TargetUnreachable { curve })
}

#[derive(Serialize)]
struct CurveRow {
    n_total: u64,
    assurance: f64,
    null_assurance: f64,
    relative_assurance: f64,
    mc_se: f64,
}

/// CSV with header `n_total,assurance,null_assurance,relative_assurance,mc_se`.
pub fn write_curve_csv<W: Write>(curve: &[AssuranceResult], out: W) -> Result<(), AssuranceError> {
    let mut w = csv::Writer::from_writer(out);
    for r in curve {
        w.serialize(CurveRow {
            n_total: r.n_total,
            assurance: r.assurance,
            null_assurance: r.null_assurance,
            relative_assurance: r.relative_assurance,
            mc_se: r.mc_se,
        })?;
    }
    w.flush()?;
    Ok(())
}
