//! Adaptive JND estimation.
//!
//! Listener answers are modelled with a Gaussian psychometric function: the
//! probability of answering "different" at strength `rho` is
//! `Phi((rho - mu) / sigma)`, where `mu` is the JND point and `sigma` the
//! response spread. [`fit`] finds the MAP estimate of `(mu, sigma)` and
//! [`next_probe`] places the next stimulus at `mu + q * sigma`, with `q`
//! nudging the listener towards the under-represented answer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RHO_MIN: f64 = 0.0;
pub const RHO_MAX: f64 = 100.0;
pub const SIGMA_MIN: f64 = 0.5;
pub const SIGMA_MAX: f64 = 50.0;

const GRID_MU: usize = 101;
const GRID_SIGMA: usize = 50;
const REFINE_TOL: f64 = 1e-4;
const MAX_SWEEPS: usize = 200;

/// One answered comparison. `h` is 0 for "same" and 1 for "different".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub rho: f64,
    pub h: u8,
    #[serde(default)]
    pub sentinel: bool,
}

impl Trial {
    pub fn new(rho: f64, h: u8) -> Self {
        Self {
            rho,
            h,
            sentinel: false,
        }
    }

    pub fn sentinel(rho: f64, h: u8) -> Self {
        Self {
            rho,
            h,
            sentinel: true,
        }
    }

    pub fn is_different(&self) -> bool {
        self.h != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychometricFit {
    pub mu: f64,
    pub sigma: f64,
    pub log_posterior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Flat,
    /// Gaussian on `mu`, log-normal on `sigma`.
    Gaussian {
        mu_mean: f64,
        mu_sd: f64,
        sigma_log_mean: f64,
        sigma_log_sd: f64,
    },
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Gaussian {
            mu_mean: 50.0,
            mu_sd: 40.0,
            sigma_log_mean: 10f64.ln(),
            sigma_log_sd: 0.75,
        }
    }
}

impl PriorSpec {
    /// Unnormalized log density.
    pub fn log_density(&self, mu: f64, sigma: f64) -> f64 {
        match *self {
            PriorSpec::Flat => 0.0,
            PriorSpec::Gaussian {
                mu_mean,
                mu_sd,
                sigma_log_mean,
                sigma_log_sd,
            } => {
                let zm = (mu - mu_mean) / mu_sd;
                let ls = sigma.ln();
                let zs = (ls - sigma_log_mean) / sigma_log_sd;
                -0.5 * zm * zm - 0.5 * zs * zs - ls
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePolicy {
    pub q_gain: f64,
    pub q_clamp: f64,
    pub prior: PriorSpec,
    pub exploration_schedule: Vec<f64>,
}

impl Default for ProbePolicy {
    fn default() -> Self {
        Self {
            q_gain: 1.0,
            q_clamp: 2.0,
            prior: PriorSpec::default(),
            exploration_schedule: vec![25.0, 75.0, 40.0, 60.0],
        }
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `ln Phi(z)`, accurate far into the lower tail.
pub fn log_std_normal_cdf(z: f64) -> f64 {
    if z > -30.0 {
        std_normal_cdf(z).ln()
    } else {
        // asymptotic expansion of Mills' ratio
        let z2 = z * z;
        let inv = 1.0 / z2;
        let series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv.powi(3) + 105.0 * inv.powi(4);
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + series.ln()
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "sigma must be > 0, got {sigma}"
        )))
    }
}

/// Log-likelihood of the non-sentinel trials.
pub fn log_likelihood(trials: &[Trial], mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(log_likelihood_unchecked(trials, mu, sigma))
}

fn log_likelihood_unchecked(trials: &[Trial], mu: f64, sigma: f64) -> f64 {
    trials
        .iter()
        .filter(|t| !t.sentinel)
        .map(|t| {
            let z = (t.rho - mu) / sigma;
            if t.is_different() {
                log_std_normal_cdf(z)
            } else {
                log_std_normal_cdf(-z)
            }
        })
        .sum()
}

/// `prod_j (1 - h_j)(1 - c(rho_j)) + h_j c(rho_j)` over non-sentinel trials.
pub fn likelihood(trials: &[Trial], mu: f64, sigma: f64) -> Result<f64> {
    log_likelihood(trials, mu, sigma).map(f64::exp)
}

pub fn log_posterior(trials: &[Trial], prior: &PriorSpec, mu: f64, sigma: f64) -> f64 {
    log_likelihood_unchecked(trials, mu, sigma) + prior.log_density(mu, sigma)
}

pub fn grid_mu(i: usize) -> f64 {
    RHO_MIN + (RHO_MAX - RHO_MIN) * i as f64 / (GRID_MU - 1) as f64
}

pub fn grid_sigma(j: usize) -> f64 {
    SIGMA_MIN + (SIGMA_MAX - SIGMA_MIN) * j as f64 / (GRID_SIGMA - 1) as f64
}

/// Coarse stage of [`fit`]: exhaustive argmax over the 101 x 50 grid.
/// Ties resolve to the first maximum in `mu`-major order.
pub fn fit_grid(trials: &[Trial], prior: &PriorSpec) -> PsychometricFit {
    let mut best = PsychometricFit {
        mu: grid_mu(0),
        sigma: grid_sigma(0),
        log_posterior: f64::NEG_INFINITY,
    };
    for i in 0..GRID_MU {
        let mu = grid_mu(i);
        for j in 0..GRID_SIGMA {
            let sigma = grid_sigma(j);
            let lp = log_posterior(trials, prior, mu, sigma);
            if lp > best.log_posterior {
                best = PsychometricFit {
                    mu,
                    sigma,
                    log_posterior: lp,
                };
            }
        }
    }
    best
}

/// MAP estimate of `(mu, sigma)` over the box `mu in [0, 100]`,
/// `sigma in [0.5, 50]`: grid search followed by coordinate-wise golden-section
/// refinement. Flat prior with no usable trials returns `(50, 25)`.
pub fn fit(trials: &[Trial], prior: &PriorSpec) -> PsychometricFit {
    let usable = trials.iter().filter(|t| !t.sentinel).count();
    if usable == 0 && matches!(prior, PriorSpec::Flat) {
        return PsychometricFit {
            mu: 50.0,
            sigma: 25.0,
            log_posterior: 0.0,
        };
    }
    let coarse = fit_grid(trials, prior);
    let mu_step = grid_mu(1) - grid_mu(0);
    let sigma_step = grid_sigma(1) - grid_sigma(0);
    let (mut mu, mut sigma) = (coarse.mu, coarse.sigma);
    for _ in 0..MAX_SWEEPS {
        let new_mu = golden_max(
            |m| log_posterior(trials, prior, m, sigma),
            (mu - mu_step).max(RHO_MIN),
            (mu + mu_step).min(RHO_MAX),
        );
        let new_sigma = golden_max(
            |s| log_posterior(trials, prior, new_mu, s),
            (sigma - sigma_step).max(SIGMA_MIN),
            (sigma + sigma_step).min(SIGMA_MAX),
        );
        let moved = (new_mu - mu).abs().max((new_sigma - sigma).abs());
        mu = new_mu;
        sigma = new_sigma;
        if moved < REFINE_TOL {
            break;
        }
    }
    let lp = log_posterior(trials, prior, mu, sigma);
    // Never return something worse than the grid point.
    if lp < coarse.log_posterior {
        return coarse;
    }
    PsychometricFit {
        mu,
        sigma,
        log_posterior: lp,
    }
}

/// Golden-section search for the maximum of a unimodal function on `[lo, hi]`.
/// Endpoints are compared at the end so box-boundary maxima are found exactly.
fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > 1e-7 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    [(lo, f(lo)), (hi, f(hi))]
        .into_iter()
        .fold(
            (mid, f(mid)),
            |best, cand| if cand.1 > best.1 { cand } else { best },
        )
        .0
}

/// Next probe strength. Exploration probes come first; afterwards
/// `clamp(mu + q sigma, 0, 100)` with `q = clamp(q_gain (n_same - n_diff), +-q_clamp)`.
pub fn next_probe(
    fit: &PsychometricFit,
    n_same: usize,
    n_diff: usize,
    trial_index: usize,
    policy: &ProbePolicy,
) -> f64 {
    if let Some(&rho) = policy.exploration_schedule.get(trial_index) {
        return rho.clamp(RHO_MIN, RHO_MAX);
    }
    let imbalance = n_same as f64 - n_diff as f64;
    let q = (policy.q_gain * imbalance).clamp(-policy.q_clamp, policy.q_clamp);
    (fit.mu + q * fit.sigma).clamp(RHO_MIN, RHO_MAX)
}

/// Simulated listener: with probability `lapse` a coin flip, otherwise
/// "different" with probability `Phi((rho - mu) / sigma)`.
pub fn simulate_listener<R: Rng + ?Sized>(
    mu_true: f64,
    sigma_true: f64,
    lapse: f64,
    rho: f64,
    rng: &mut R,
) -> u8 {
    if lapse > 0.0 && rng.random::<f64>() < lapse {
        return rng.random::<bool>() as u8;
    }
    let p = std_normal_cdf((rho - mu_true) / sigma_true);
    (rng.random::<f64>() < p) as u8
}

/// Fraction of non-sentinel trials on the expected side of the fitted JND.
pub fn consistency(trials: &[Trial], fit: &PsychometricFit) -> Result<f64> {
    let mut n = 0usize;
    let mut agree = 0usize;
    for t in trials.iter().filter(|t| !t.sentinel) {
        n += 1;
        let expected_diff = t.rho >= fit.mu;
        if expected_diff == t.is_different() {
            agree += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("no non-sentinel trials"));
    }
    Ok(agree as f64 / n as f64)
}

/// One adaptive track: trial log plus the current fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JndSession {
    pub policy: ProbePolicy,
    pub trials: Vec<Trial>,
    pub fit: PsychometricFit,
}

impl JndSession {
    pub fn new(policy: ProbePolicy) -> Self {
        let fit = fit(&[], &policy.prior);
        Self {
            policy,
            trials: Vec::new(),
            fit,
        }
    }

    pub fn adaptive_count(&self) -> usize {
        self.trials.iter().filter(|t| !t.sentinel).count()
    }

    pub fn counts(&self) -> (usize, usize) {
        self.trials
            .iter()
            .filter(|t| !t.sentinel)
            .fold((0, 0), |(s, d), t| {
                if t.is_different() {
                    (s, d + 1)
                } else {
                    (s + 1, d)
                }
            })
    }

    pub fn next_probe(&self) -> f64 {
        let (n_same, n_diff) = self.counts();
        next_probe(
            &self.fit,
            n_same,
            n_diff,
            self.adaptive_count(),
            &self.policy,
        )
    }

    /// Appends a trial and refits when it is an adaptive one.
    pub fn record(&mut self, trial: Trial) {
        let refit = !trial.sentinel;
        self.trials.push(trial);
        if refit {
            self.fit = fit(&self.trials, &self.policy.prior);
        }
    }

    pub fn consistency(&self) -> Result<f64> {
        consistency(&self.trials, &self.fit)
    }
}

/// Serialized fit summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mu: f64,
    pub sigma: f64,
    pub log_posterior: f64,
    pub n_trials: usize,
    pub consistency: Option<f64>,
}

impl FitReport {
    pub fn new(trials: &[Trial], fit: &PsychometricFit) -> Self {
        Self {
            mu: fit.mu,
            sigma: fit.sigma,
            log_posterior: fit.log_posterior,
            n_trials: trials.iter().filter(|t| !t.sentinel).count(),
            consistency: consistency(trials, fit).ok(),
        }
    }
}
