use elicit_core::aggregate::{encode_covariates, CovariateMatrix, PseudoData};
use elicit_core::elicitation::WorkshopSession;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub const SESSION_FIXTURE: &str = include_str!("../../../../data/workshop_session.json");
pub const MOMENTS_FIXTURE: &str = include_str!("../../../../data/expert_moments.csv");

pub fn fixture_covariates() -> CovariateMatrix {
    let s = WorkshopSession::import_session(SESSION_FIXTURE).unwrap();
    let profiles: Vec<_> = s.experts().iter().map(|e| e.profile.clone()).collect();
    encode_covariates(&profiles).unwrap()
}

/// Data drawn from the hierarchical model itself with the workshop covariates.
pub fn synthetic_data(sigma: f64, rho: f64, tau: f64, k: usize, seed: u64) -> (PseudoData, CovariateMatrix) {
    let x = fixture_covariates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = [-2.4, -2.1];
    let slopes = [[0.10, 0.0, -0.20, 0.15, 0.05, -0.10], [0.05, 0.0, 0.10, -0.05, 0.0, 0.20]];
    let noise = Normal::new(0.0, tau).unwrap();
    let z = x
        .rows
        .iter()
        .map(|row| {
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let u = [sigma * e1, sigma * (rho * e1 + (1.0 - rho * rho).sqrt() * e2)];
            [0, 1].map(|j| {
                let mu = alpha[j] + row.iter().zip(&slopes[j]).map(|(a, b)| a * b).sum::<f64>() + u[j];
                (0..k).map(|_| mu + noise.sample(&mut rng)).collect()
            })
        })
        .collect();
    (PseudoData { z }, x)
}
