//! Pooling of per-expert beta marginals into an equal-weight mixture of
//! Gaussian-copula bivariate priors.
//!
//! The copula correlation comes from a hierarchical model fitted to
//! logit-scale pseudo-samples of every expert's two marginals:
//!
//! ```text
//! z_ijk ~ N(alpha_j + x_i' beta_j + u_ij, tau^2)
//! (u_i1, u_i2) ~ BVN(0, sigma^2 [[1, rho], [rho, 1]])
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distfit::{beta_from_moments, BetaParams, DistFitError};
use crate::elicitation::{Arm, ExpertMarginals, ExpertProfile, Round};
use crate::special::{logit, normal_cdf};

pub const N_COVARIATES: usize = 6;
pub const COVARIATE_NAMES: [&str; N_COVARIATES] = [
    "years_practice",
    "prescribed_060",
    "prescribed_015",
    "max_dose_mg",
    "trained_trials",
    "trained_stats",
];
pub const MIN_PSEUDO_SAMPLES: usize = 100;
pub const RHAT_THRESHOLD: f64 = 1.1;

const INTERCEPT_PRIOR_VAR: f64 = 100.0;
const SLOPE_PRIOR_VAR: f64 = 10.0;
const IG_SHAPE: f64 = 1.0;
const IG_SCALE: f64 = 1.0;
const LOGIT_CLAMP: f64 = 1e-10;
const SAMPLE_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("expert '{expert_id}' is missing survey item '{field}'")]
    MissingField { expert_id: String, field: &'static str },
    #[error("at least 2 experts are needed to fit latent effects, got {0}")]
    TooFewExperts(usize),
    #[error("need at least {min} pseudo-samples per expert and arm, got {got}")]
    TooFewPseudoSamples { got: usize, min: usize },
    #[error("data shape mismatch: {0}")]
    Shape(String),
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("copula correlation must lie in (-1, 1), got {0}")]
    InvalidCorrelation(f64),
    #[error("mixture needs at least one expert")]
    EmptyMixture,
    #[error("need at least {min} rows, got {got}")]
    TooFewRows { got: usize, min: usize },
    #[error("moments table: {0}")]
    Table(String),
    #[error(transparent)]
    Fit(#[from] DistFitError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------- covariates

/// One row of encoded covariates per expert, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    pub rows: Vec<[f64; N_COVARIATES]>,
}

impl CovariateMatrix {
    pub fn n_experts(&self) -> usize {
        self.rows.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }
}

fn require<T: Copy>(p: &ExpertProfile, v: Option<T>, field: &'static str) -> Result<T, AggregateError> {
    v.ok_or_else(|| AggregateError::MissingField { expert_id: p.expert_id.clone(), field })
}

/// Years in practice (band midpoint) and maximum dose are centered and
/// scaled to unit sample sd; indicator columns are left as 0/1. A constant
/// continuous column, or a single expert, is only centered.
pub fn encode_covariates(profiles: &[ExpertProfile]) -> Result<CovariateMatrix, AggregateError> {
    let mut rows = Vec::with_capacity(profiles.len());
    for p in profiles {
        let flag = |v: bool| if v { 1.0 } else { 0.0 };
        rows.push([
            require(p, p.years_practice_band, "years_practice_band")?.midpoint(),
            flag(require(p, p.prescribed_060_last_year, "prescribed_060_last_year")?),
            flag(require(p, p.prescribed_015_last_year, "prescribed_015_last_year")?),
            require(p, p.max_dose_mg, "max_dose_mg")?,
            flag(require(p, p.trained_trials, "trained_trials")?),
            flag(require(p, p.trained_stats, "trained_stats")?),
        ]);
    }
    let n = rows.len();
    for col in [0, 3] {
        if n == 0 {
            break;
        }
        let mean = rows.iter().map(|r| r[col]).sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (rows.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        for r in &mut rows {
            r[col] -= mean;
            if sd > 0.0 {
                r[col] /= sd;
            }
        }
    }
    Ok(CovariateMatrix { rows })
}

// ------------------------------------------------------------ pseudo-samples

/// Logit-scale pseudo-samples, `z[i][arm]` with arm 0 = high dose.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoData {
    pub z: Vec<[Vec<f64>; 2]>,
}

impl PseudoData {
    pub fn n_experts(&self) -> usize {
        self.z.len()
    }
}

/// Draws `k` values from each expert-arm beta and maps them to the logit
/// scale. Each expert-arm pair reads its own ChaCha stream.
pub fn pseudo_samples(experts: &[(BetaParams, BetaParams)], k: usize, seed: u64) -> Result<PseudoData, AggregateError> {
    if k < MIN_PSEUDO_SAMPLES {
        return Err(AggregateError::TooFewPseudoSamples { got: k, min: MIN_PSEUDO_SAMPLES });
    }
    let draw = |p: &BetaParams, stream: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let dist = Beta::new(p.alpha(), p.beta()).expect("validated beta parameters");
        (0..k)
            .map(|_| logit(dist.sample(&mut rng).clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)))
            .collect()
    };
    let z = experts
        .iter()
        .enumerate()
        .map(|(i, (hi, lo))| [draw(hi, 2 * i as u64), draw(lo, 2 * i as u64 + 1)])
        .collect();
    Ok(PseudoData { z })
}

// ------------------------------------------------------------- Gibbs sampler

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub draws: usize,
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self { chains: 4, burn_in: 2000, draws: 10_000, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub chain: usize,
    pub alpha: [f64; 2],
    pub beta: [[f64; N_COVARIATES]; 2],
    pub sigma: f64,
    pub rho: f64,
    pub tau: f64,
    pub u: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Metropolis acceptance rate for rho over kept draws, per chain.
    pub rho_acceptance: Vec<f64>,
    /// Split-chain potential scale reduction for the scalar parameters.
    pub rhat: BTreeMap<String, f64>,
    pub max_rhat: f64,
    /// True when every R-hat is below the threshold.
    pub converged: bool,
    /// Pseudo-data without within-expert spread; the residual scale is then
    /// driven to zero by the data and the fit is not meaningful.
    pub degenerate_data: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalPosterior {
    pub draws: Vec<PosteriorDraw>,
    pub diagnostics: Diagnostics,
}

impl HierarchicalPosterior {
    pub fn mean_of(&self, f: impl Fn(&PosteriorDraw) -> f64) -> f64 {
        self.draws.iter().map(&f).sum::<f64>() / self.draws.len() as f64
    }

    pub fn sd_of(&self, f: impl Fn(&PosteriorDraw) -> f64) -> f64 {
        let m = self.mean_of(&f);
        let n = self.draws.len() as f64;
        (self.draws.iter().map(|d| (f(d) - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
    }
}

/// Per expert-arm sufficient statistics.
struct Cell {
    n: f64,
    mean: f64,
    ss: f64,
}

struct Prepared {
    cells: Vec<[Cell; 2]>,
    design: Vec<[f64; N_COVARIATES + 1]>,
    /// Sum over experts of w_i w_i'.
    cross: DMatrix<f64>,
    total_n: f64,
    total_ss: f64,
}

fn prepare(data: &PseudoData, x: &CovariateMatrix) -> Prepared {
    let cells: Vec<[Cell; 2]> = data
        .z
        .iter()
        .map(|arms| {
            arms.each_ref().map(|zs| {
                let n = zs.len() as f64;
                let mean = zs.iter().sum::<f64>() / n;
                let ss = zs.iter().map(|z| (z - mean).powi(2)).sum();
                Cell { n, mean, ss }
            })
        })
        .collect();
    let design: Vec<[f64; N_COVARIATES + 1]> = x
        .rows
        .iter()
        .map(|r| {
            let mut w = [1.0; N_COVARIATES + 1];
            w[1..].copy_from_slice(r);
            w
        })
        .collect();
    let p = N_COVARIATES + 1;
    let mut cross = DMatrix::zeros(p, p);
    for w in &design {
        let wv = DVector::from_row_slice(w);
        cross += &wv * wv.transpose();
    }
    let total_n = cells.iter().flat_map(|c| c.iter()).map(|c| c.n).sum();
    let total_ss = cells.iter().flat_map(|c| c.iter()).map(|c| c.ss).sum();
    Prepared { cells, design, cross, total_n, total_ss }
}

fn inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, scale: f64) -> f64 {
    1.0 / Gamma::new(shape, 1.0 / scale).expect("positive shape and scale").sample(rng)
}

fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Centered parameterization: `eta[i][j]` is expert i's arm-j location
/// alpha_j + x_i' beta_j + u_ij. With many pseudo-samples per cell the data
/// pin eta tightly, and updating it directly avoids the strong coupling
/// between coefficients and latent effects.
struct ChainState {
    coef: [DVector<f64>; 2],
    eta: Vec<[f64; 2]>,
    u: Vec<[f64; 2]>,
    sigma2: f64,
    tau2: f64,
    rho: f64,
}

impl ChainState {
    fn fitted(&self, prep: &Prepared, i: usize, j: usize) -> f64 {
        let w = &prep.design[i];
        let c = &self.coef[j];
        (0..w.len()).map(|q| w[q] * c[q]).sum()
    }

    /// Sum over experts of u_i' R^{-1} u_i for correlation `rho`.
    fn latent_quad(&self, rho: f64) -> f64 {
        let d = 1.0 - rho * rho;
        self.u
            .iter()
            .map(|u| (u[0] * u[0] - 2.0 * rho * u[0] * u[1] + u[1] * u[1]) / d)
            .sum()
    }

    fn latent_precision(&self) -> Matrix2<f64> {
        Matrix2::new(1.0, -self.rho, -self.rho, 1.0) / ((1.0 - self.rho * self.rho) * self.sigma2)
    }
}

fn run_chain(prep: &Prepared, cfg: &GibbsConfig, chain: usize) -> (Vec<PosteriorDraw>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let n_exp = prep.cells.len();
    let p = N_COVARIATES + 1;

    let mut prior_prec = DMatrix::<f64>::zeros(2 * p, 2 * p);
    for j in 0..2 {
        prior_prec[(j * p, j * p)] = 1.0 / INTERCEPT_PRIOR_VAR;
        for q in 1..p {
            prior_prec[(j * p + q, j * p + q)] = 1.0 / SLOPE_PRIOR_VAR;
        }
    }

    // dispersed starting points so that R-hat can detect stuck chains
    let mut state = ChainState {
        coef: [0, 1].map(|j| {
            let mean = prep.cells.iter().map(|c| c[j].mean).sum::<f64>() / n_exp as f64;
            let mut v = DVector::zeros(p);
            v[0] = mean + std_normal(&mut rng);
            v
        }),
        eta: prep.cells.iter().map(|c| [c[0].mean, c[1].mean]).collect(),
        u: vec![[0.0; 2]; n_exp],
        sigma2: (std_normal(&mut rng)).exp(),
        tau2: (std_normal(&mut rng)).exp(),
        rho: rng.random_range(-0.5..0.5),
    };

    let mut step = 0.3;
    let (mut accepted, mut proposed) = (0usize, 0usize);
    let (mut window_acc, mut window_n) = (0usize, 0usize);
    let mut draws = Vec::with_capacity(cfg.draws);

    for iter in 0..cfg.burn_in + cfg.draws {
        // expert locations
        let s_inv = state.latent_precision();
        for i in 0..n_exp {
            let c = &prep.cells[i];
            let lik = Vector2::new(c[0].n, c[1].n) / state.tau2;
            let prec = s_inv + Matrix2::from_diagonal(&lik);
            let prior_mean = Vector2::new(state.fitted(prep, i, 0), state.fitted(prep, i, 1));
            let ybar = Vector2::new(c[0].mean, c[1].mean);
            let chol = prec.cholesky().expect("2x2 precision is positive definite");
            let mean = chol.solve(&(s_inv * prior_mean + lik.component_mul(&ybar)));
            let eps = Vector2::new(std_normal(&mut rng), std_normal(&mut rng));
            let shift = chol.l().transpose().solve_upper_triangular(&eps).expect("invertible");
            let eta = mean + shift;
            state.eta[i] = [eta[0], eta[1]];
        }

        // both arms' coefficients jointly, regressing eta on the design
        let mut prec = prior_prec.clone();
        let mut rhs = DVector::<f64>::zeros(2 * p);
        for j in 0..2 {
            for k in 0..2 {
                for q in 0..p {
                    for r in 0..p {
                        prec[(j * p + q, k * p + r)] += s_inv[(j, k)] * prep.cross[(q, r)];
                    }
                }
            }
        }
        for (i, w) in prep.design.iter().enumerate() {
            let se = s_inv * Vector2::new(state.eta[i][0], state.eta[i][1]);
            for j in 0..2 {
                for q in 0..p {
                    rhs[j * p + q] += se[j] * w[q];
                }
            }
        }
        let chol = prec.cholesky().expect("posterior precision is positive definite");
        let mean = chol.solve(&rhs);
        let eps = DVector::from_fn(2 * p, |_, _| std_normal(&mut rng));
        let shift = chol.l().transpose().solve_upper_triangular(&eps).expect("triangular factor is invertible");
        let b = mean + shift;
        state.coef = [0, 1].map(|j| b.rows(j * p, p).into_owned());
        for i in 0..n_exp {
            state.u[i] = [0, 1].map(|j| state.eta[i][j] - state.fitted(prep, i, j));
        }

        // latent scale
        let q = state.latent_quad(state.rho);
        state.sigma2 = inv_gamma(&mut rng, IG_SHAPE + n_exp as f64, IG_SCALE + 0.5 * q);

        // residual scale from sufficient statistics
        let mut sse = prep.total_ss;
        for (i, c) in prep.cells.iter().enumerate() {
            for j in 0..2 {
                sse += c[j].n * (c[j].mean - state.eta[i][j]).powi(2);
            }
        }
        state.tau2 = inv_gamma(&mut rng, IG_SHAPE + 0.5 * prep.total_n, IG_SCALE + 0.5 * sse);

        // latent correlation: random-walk Metropolis on (-1, 1), flat prior
        let log_target = |rho: f64, s: &ChainState| {
            -0.5 * n_exp as f64 * (1.0 - rho * rho).ln() - s.latent_quad(rho) / (2.0 * s.sigma2)
        };
        let proposal = state.rho + step * std_normal(&mut rng);
        let accept = proposal.abs() < 1.0 && {
            let log_ratio = log_target(proposal, &state) - log_target(state.rho, &state);
            rng.random::<f64>().ln() < log_ratio
        };
        if accept {
            state.rho = proposal;
        }

        if iter < cfg.burn_in {
            window_n += 1;
            window_acc += accept as usize;
            if window_n == 100 {
                let rate = window_acc as f64 / window_n as f64;
                if rate < 0.2 {
                    step *= 0.8;
                } else if rate > 0.4 {
                    step = (step * 1.25).min(2.0);
                }
                window_n = 0;
                window_acc = 0;
            }
        } else {
            proposed += 1;
            accepted += accept as usize;
            draws.push(PosteriorDraw {
                chain,
                alpha: [state.coef[0][0], state.coef[1][0]],
                beta: [0, 1].map(|j| {
                    let mut b = [0.0; N_COVARIATES];
                    for (q, v) in b.iter_mut().enumerate() {
                        *v = state.coef[j][q + 1];
                    }
                    b
                }),
                sigma: state.sigma2.sqrt(),
                rho: state.rho,
                tau: state.tau2.sqrt(),
                u: state.u.clone(),
            });
        }
    }
    let rate = if proposed > 0 { accepted as f64 / proposed as f64 } else { 0.0 };
    (draws, rate)
}

/// Split-chain potential scale reduction.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .collect();
    let len = halves.iter().map(|h| h.len()).min().unwrap_or(0);
    if halves.len() < 2 || len < 2 {
        return f64::NAN;
    }
    let n = len as f64;
    let means: Vec<f64> = halves.iter().map(|h| h.iter().sum::<f64>() / n).collect();
    let within: f64 = halves
        .iter()
        .zip(&means)
        .map(|(h, m)| h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / halves.len() as f64;
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let between = n * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() as f64 - 1.0);
    if within <= 0.0 {
        return if between <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * within + between / n;
    (var_plus / within).sqrt()
}

/// Metropolis-within-Gibbs fit. Non-convergence is reported through
/// `diagnostics.converged`; the draws are returned either way.
pub fn fit_hierarchical(
    data: &PseudoData,
    covariates: &CovariateMatrix,
    cfg: GibbsConfig,
) -> Result<HierarchicalPosterior, AggregateError> {
    let n_exp = data.n_experts();
    if n_exp < 2 {
        return Err(AggregateError::TooFewExperts(n_exp));
    }
    if covariates.n_experts() != n_exp {
        return Err(AggregateError::Shape(format!(
            "{n_exp} experts in the data but {} covariate rows",
            covariates.n_experts()
        )));
    }
    if data.z.iter().flat_map(|a| a.iter()).any(|z| z.is_empty()) {
        return Err(AggregateError::Shape("every expert and arm needs pseudo-samples".into()));
    }
    if cfg.chains == 0 || cfg.draws < 4 {
        return Err(AggregateError::Config("need at least one chain and four kept draws".into()));
    }
    let prep = prepare(data, covariates);

    let per_chain: Vec<(Vec<PosteriorDraw>, f64)> =
        (0..cfg.chains).into_par_iter().map(|c| run_chain(&prep, &cfg, c)).collect();

    let scalar = |f: fn(&PosteriorDraw) -> f64| -> Vec<Vec<f64>> {
        per_chain.iter().map(|(d, _)| d.iter().map(f).collect()).collect()
    };
    let mut rhat = BTreeMap::new();
    rhat.insert("alpha_high".to_string(), split_rhat(&scalar(|d| d.alpha[0])));
    rhat.insert("alpha_low".to_string(), split_rhat(&scalar(|d| d.alpha[1])));
    rhat.insert("sigma".to_string(), split_rhat(&scalar(|d| d.sigma)));
    rhat.insert("rho".to_string(), split_rhat(&scalar(|d| d.rho)));
    rhat.insert("tau".to_string(), split_rhat(&scalar(|d| d.tau)));
    let max_rhat = rhat.values().copied().fold(f64::NEG_INFINITY, |a, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });

    let rho_acceptance = per_chain.iter().map(|(_, r)| *r).collect();
    let draws = per_chain.into_iter().flat_map(|(d, _)| d).collect();
    Ok(HierarchicalPosterior {
        draws,
        diagnostics: Diagnostics {
            rho_acceptance,
            rhat,
            max_rhat,
            converged: max_rhat < RHAT_THRESHOLD,
            degenerate_data: prep.total_ss <= f64::EPSILON * prep.total_n,
        },
    })
}

/// Posterior mean of rho sigma^2 / (sigma^2 + tau^2): the model-implied
/// correlation between one expert's two logit-scale judgments.
pub fn induced_corr(post: &HierarchicalPosterior) -> f64 {
    post.mean_of(|d| {
        let s2 = d.sigma * d.sigma;
        d.rho * s2 / (s2 + d.tau * d.tau)
    })
}

// ------------------------------------------------------------------- mixture

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivariateExpertPrior {
    pub marginal_high: BetaParams,
    pub marginal_low: BetaParams,
    pub copula_corr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePrior {
    pub components: Vec<BivariateExpertPrior>,
}

impl MixturePrior {
    pub fn weights(&self) -> Vec<f64> {
        vec![1.0 / self.components.len() as f64; self.components.len()]
    }

    pub fn copula_corr(&self) -> f64 {
        self.components.first().map_or(0.0, |c| c.copula_corr)
    }
}

pub fn build_mixture(marginals: &[(BetaParams, BetaParams)], r: f64) -> Result<MixturePrior, AggregateError> {
    if marginals.is_empty() {
        return Err(AggregateError::EmptyMixture);
    }
    if !(r > -1.0 && r < 1.0) {
        return Err(AggregateError::InvalidCorrelation(r));
    }
    Ok(MixturePrior {
        components: marginals
            .iter()
            .map(|&(h, l)| BivariateExpertPrior { marginal_high: h, marginal_low: l, copula_corr: r })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorDraw {
    pub p1: f64,
    pub p2: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSampleSet {
    pub rows: Vec<PriorDraw>,
    pub seed: u64,
    pub components: usize,
    pub copula_corr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub seed: u64,
    pub size: usize,
    pub components: usize,
    pub copula_corr: f64,
}

impl PriorSampleSet {
    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn sidecar(&self) -> SampleSidecar {
        SampleSidecar {
            seed: self.seed,
            size: self.rows.len(),
            components: self.components,
            copula_corr: self.copula_corr,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AggregateError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads rows written by `write_csv`; provenance comes from the sidecar
    /// when it is available.
    pub fn read_csv<R: Read>(input: R, sidecar: Option<SampleSidecar>) -> Result<Self, AggregateError> {
        let mut rd = csv::Reader::from_reader(input);
        let rows = rd.deserialize().collect::<Result<Vec<PriorDraw>, _>>()?;
        if rows.is_empty() {
            return Err(AggregateError::TooFewRows { got: 0, min: 1 });
        }
        let sc = sidecar.unwrap_or(SampleSidecar { seed: 0, size: rows.len(), components: 0, copula_corr: 0.0 });
        Ok(Self { rows, seed: sc.seed, components: sc.components, copula_corr: sc.copula_corr })
    }
}

fn open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Equal-weight component choice, then a correlated normal pair pushed
/// through the normal cdf and each marginal's beta quantile. Rows are
/// produced in fixed-size chunks, each with its own ChaCha stream, so the
/// output does not depend on thread scheduling.
pub fn sample_mixture(m: &MixturePrior, n: usize, seed: u64) -> PriorSampleSet {
    let n_chunks = n.div_ceil(SAMPLE_CHUNK);
    let rows: Vec<PriorDraw> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
            (0..len)
                .map(|_| {
                    let comp = &m.components[rng.random_range(0..m.components.len())];
                    let r = comp.copula_corr;
                    let z1 = std_normal(&mut rng);
                    let z2 = r * z1 + (1.0 - r * r).sqrt() * std_normal(&mut rng);
                    let p1 = open_unit(comp.marginal_high.quantile(normal_cdf(z1)));
                    let p2 = open_unit(comp.marginal_low.quantile(normal_cdf(z2)));
                    PriorDraw { p1, p2, delta: p2 - p1 }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    PriorSampleSet { rows, seed, components: m.components.len(), copula_corr: m.copula_corr() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
}

fn column_stats(mut v: Vec<f64>) -> Moments {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let median = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
    Moments { mean, median, sd }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSummary {
    pub p1: Moments,
    pub p2: Moments,
    pub delta: Moments,
    pub corr_p1_p2: f64,
}

pub fn mixture_summary(s: &PriorSampleSet) -> Result<MixtureSummary, AggregateError> {
    if s.rows.len() < 2 {
        return Err(AggregateError::TooFewRows { got: s.rows.len(), min: 2 });
    }
    let p1: Vec<f64> = s.rows.iter().map(|r| r.p1).collect();
    let p2: Vec<f64> = s.rows.iter().map(|r| r.p2).collect();
    let delta: Vec<f64> = s.rows.iter().map(|r| r.delta).collect();
    let (a, b) = (column_stats(p1.clone()), column_stats(p2.clone()));
    let cov = p1.iter().zip(&p2).map(|(x, y)| (x - a.mean) * (y - b.mean)).sum::<f64>() / (p1.len() as f64 - 1.0);
    Ok(MixtureSummary { p1: a, p2: b, delta: column_stats(delta), corr_p1_p2: cov / (a.sd * b.sd) })
}

// ------------------------------------------------------------------ pipeline

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Pseudo-samples drawn per expert and arm.
    pub pseudo_samples: usize,
    pub chains: usize,
    pub burn_in: usize,
    pub gibbs_draws: usize,
    /// Rows of the final prior sample.
    pub draws: usize,
    /// Pseudo-samples use `seed`, the sampler `seed + 1`, the mixture
    /// sample `seed + 2`.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let g = GibbsConfig::default();
        Self { pseudo_samples: 500, chains: g.chains, burn_in: g.burn_in, gibbs_draws: g.draws, draws: 1_000_000, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub experts: Vec<String>,
    pub config: PipelineConfig,
    pub induced_corr: f64,
    pub sigma: f64,
    pub rho: f64,
    pub tau: f64,
    pub diagnostics: Diagnostics,
    pub summary: MixtureSummary,
}

/// Pseudo-data, hierarchical fit, mixture construction and sampling for a
/// set of experts given as `(id, high-dose marginal, low-dose marginal)`
/// with matching profiles.
pub fn aggregate_experts(
    marginals: &[(String, BetaParams, BetaParams)],
    profiles: &[ExpertProfile],
    cfg: PipelineConfig,
) -> Result<(PriorSampleSet, PipelineReport), AggregateError> {
    let aligned: Vec<ExpertProfile> = align_profiles(marginals, profiles)?.into_iter().cloned().collect();
    let covariates = encode_covariates(&aligned)?;
    let pairs: Vec<(BetaParams, BetaParams)> = marginals.iter().map(|(_, h, l)| (*h, *l)).collect();
    let data = pseudo_samples(&pairs, cfg.pseudo_samples, cfg.seed)?;
    let gibbs =
        GibbsConfig { chains: cfg.chains, burn_in: cfg.burn_in, draws: cfg.gibbs_draws, seed: cfg.seed.wrapping_add(1) };
    let post = fit_hierarchical(&data, &covariates, gibbs)?;
    let r = induced_corr(&post);
    let mixture = build_mixture(&pairs, r)?;
    let samples = sample_mixture(&mixture, cfg.draws, cfg.seed.wrapping_add(2));
    let report = PipelineReport {
        experts: marginals.iter().map(|(id, _, _)| id.clone()).collect(),
        config: cfg,
        induced_corr: r,
        sigma: post.mean_of(|d| d.sigma),
        rho: post.mean_of(|d| d.rho),
        tau: post.mean_of(|d| d.tau),
        summary: mixture_summary(&samples)?,
        diagnostics: post.diagnostics,
    };
    Ok((samples, report))
}

// ------------------------------------------------------------ moments table

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub expert: String,
    pub round: Round,
    pub arm: Arm,
    pub mean: f64,
    pub sd: f64,
}

/// Parses `expert,round,arm,mean,sd` rows (probability scale, `#` comments).
pub fn parse_moments_table(document: &str) -> Result<Vec<MomentRow>, AggregateError> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(document.as_bytes());
    let rows = rd
        .deserialize()
        .collect::<Result<Vec<MomentRow>, _>>()
        .map_err(|e| AggregateError::Table(e.to_string()))?;
    if rows.is_empty() {
        return Err(AggregateError::Table("no rows".into()));
    }
    Ok(rows)
}

/// Rebuilds each expert's final marginals from a moments table, preferring
/// `round` and falling back to round 1 for a missing arm. Experts keep the
/// order of first appearance.
pub fn marginals_from_moments(rows: &[MomentRow], round: Round) -> Result<Vec<(String, BetaParams, BetaParams)>, AggregateError> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.expert.as_str()) {
            order.push(&r.expert);
        }
    }
    let find = |e: &str, rd: Round, arm: Arm| rows.iter().find(|r| r.expert == e && r.round == rd && r.arm == arm);
    order
        .into_iter()
        .map(|e| {
            let pick = |arm: Arm| -> Result<BetaParams, AggregateError> {
                let row = find(e, round, arm)
                    .or_else(|| find(e, Round::One, arm))
                    .ok_or_else(|| AggregateError::Table(format!("expert '{e}' has no {arm} row")))?;
                Ok(beta_from_moments(row.mean, row.sd)?)
            };
            Ok((e.to_owned(), pick(Arm::HighDose)?, pick(Arm::LowDose)?))
        })
        .collect()
}

/// Pairs each expert's marginals with the covariate profile of the same id.
pub fn align_profiles<'a>(
    marginals: &[(String, BetaParams, BetaParams)],
    profiles: &'a [ExpertProfile],
) -> Result<Vec<&'a ExpertProfile>, AggregateError> {
    marginals
        .iter()
        .map(|(id, _, _)| {
            profiles
                .iter()
                .find(|p| &p.expert_id == id)
                .ok_or_else(|| AggregateError::Table(format!("no profile for expert '{id}'")))
        })
        .collect()
}

impl From<&ExpertMarginals> for (BetaParams, BetaParams) {
    fn from(m: &ExpertMarginals) -> Self {
        (m.high_dose, m.low_dose)
    }
}
