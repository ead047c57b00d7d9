//! Problem instance: observation densities, change-time prior and costs.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Which side of the change point an observation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Before the event, density `f0`.
    Pre,
    /// At or after the event, density `f1`.
    Post,
}

/// Hooks a pre/post-change density pair must provide.
///
/// The solver only ever needs log densities (products of many densities
/// underflow quickly) and a sampler for simulation.
pub trait ObservationDensity: Send + Sync {
    fn log_pdf(&self, regime: Regime, x: f64) -> f64;

    fn sample<R: Rng + ?Sized>(&self, regime: Regime, rng: &mut R) -> f64;

    fn pdf(&self, regime: Regime, x: f64) -> f64 {
        // Clamped so ratios of far-tail densities stay finite.
        self.log_pdf(regime, x).exp().max(f64::MIN_POSITIVE)
    }

    /// `ln(f1(x) / f0(x))`.
    fn log_likelihood_ratio(&self, x: f64) -> f64 {
        self.log_pdf(Regime::Post, x) - self.log_pdf(Regime::Pre, x)
    }
}

/// Gaussian pre/post-change observation model `f0 = N(mu0, sigma0^2)`,
/// `f1 = N(mu1, sigma1^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub mu0: f64,
    pub sigma0: f64,
    pub mu1: f64,
    pub sigma1: f64,
}

impl SensorModel {
    pub fn new(mu0: f64, sigma0: f64, mu1: f64, sigma1: f64) -> Result<Self> {
        let model = Self {
            mu0,
            sigma0,
            mu1,
            sigma1,
        };
        model.validate()?;
        Ok(model)
    }

    /// `N(0, 1)` before the change and `N(1, 1)` after.
    pub fn unit_shift() -> Self {
        Self {
            mu0: 0.0,
            sigma0: 1.0,
            mu1: 1.0,
            sigma1: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu0", self.mu0), ("mu1", self.mu1)] {
            if !v.is_finite() {
                return Err(invalid(name, format!("must be finite, got {v}")));
            }
        }
        for (name, v) in [("sigma0", self.sigma0), ("sigma1", self.sigma1)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        if self.mu0 == self.mu1 && self.sigma0 == self.sigma1 {
            return Err(invalid(
                "mu1",
                "post-change density equals pre-change density",
            ));
        }
        Ok(())
    }

    pub fn params(&self, regime: Regime) -> (f64, f64) {
        match regime {
            Regime::Pre => (self.mu0, self.sigma0),
            Regime::Post => (self.mu1, self.sigma1),
        }
    }

    pub fn equal_variance(&self) -> bool {
        self.sigma0 == self.sigma1
    }

    /// Joint log-likelihood ratio of `m` observations summing to `s`, when the
    /// variances agree. This is the scalar sufficient statistic route.
    pub fn sum_log_likelihood_ratio(&self, m: usize, s: f64) -> Option<f64> {
        if !self.equal_variance() {
            return None;
        }
        let var = self.sigma0 * self.sigma0;
        let m = m as f64;
        Some(
            ((self.mu1 - self.mu0) * s - m * (self.mu1 * self.mu1 - self.mu0 * self.mu0) / 2.0)
                / var,
        )
    }
}

impl ObservationDensity for SensorModel {
    fn log_pdf(&self, regime: Regime, x: f64) -> f64 {
        let (mu, sigma) = self.params(regime);
        let z = (x - mu) / sigma;
        -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * PI).ln()
    }

    fn sample<R: Rng + ?Sized>(&self, regime: Regime, rng: &mut R) -> f64 {
        let (mu, sigma) = self.params(regime);
        // sigma > 0 is a construction invariant.
        Normal::new(mu, sigma).expect("validated sigma").sample(rng)
    }

    fn log_likelihood_ratio(&self, x: f64) -> f64 {
        if self.equal_variance() {
            let var = self.sigma0 * self.sigma0;
            ((self.mu1 - self.mu0) * x - (self.mu1 * self.mu1 - self.mu0 * self.mu0) / 2.0) / var
        } else {
            self.log_pdf(Regime::Post, x) - self.log_pdf(Regime::Pre, x)
        }
    }
}

/// Prior on the change slot `T`: mass `rho` at 0, then geometric(`p`) on
/// `{1, 2, ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangePrior {
    pub rho: f64,
    pub p: f64,
}

impl ChangePrior {
    pub fn new(rho: f64, p: f64) -> Result<Self> {
        let prior = Self { rho, p };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid(
                "rho",
                format!("must lie in [0, 1], got {}", self.rho),
            ));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(invalid("p", format!("must lie in (0, 1], got {}", self.p)));
        }
        Ok(())
    }

    /// `P(T = k)`.
    pub fn mass(&self, k: u64) -> f64 {
        if k == 0 {
            self.rho
        } else {
            (1.0 - self.rho) * (1.0 - self.p).powf((k - 1) as f64) * self.p
        }
    }

    /// `P(T > k)`.
    pub fn survival(&self, k: u64) -> f64 {
        (1.0 - self.rho) * (1.0 - self.p).powf(k as f64)
    }

    pub fn mean(&self) -> f64 {
        (1.0 - self.rho) / self.p
    }
}

/// `prior_mass(prior, k)`.
pub fn prior_mass(prior: &ChangePrior, k: u64) -> f64 {
    prior.mass(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Costs {
    /// Cost per observation per awake sensor per slot.
    pub lambda_s: f64,
    /// False-alarm cost (the Lagrange multiplier of the false-alarm constraint).
    pub lambda_f: f64,
}

impl Costs {
    pub fn new(lambda_s: f64, lambda_f: f64) -> Result<Self> {
        let costs = Self { lambda_s, lambda_f };
        costs.validate()?;
        Ok(costs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s.is_finite() && self.lambda_s >= 0.0) {
            return Err(invalid(
                "lambda_s",
                format!("must be >= 0, got {}", self.lambda_s),
            ));
        }
        // lambda_f = 0 is accepted: it is the limit calibration reaches as the
        // false-alarm budget goes to 1, and it makes stopping free.
        if !(self.lambda_f.is_finite() && self.lambda_f >= 0.0) {
            return Err(invalid(
                "lambda_f",
                format!("must be >= 0, got {}", self.lambda_f),
            ));
        }
        Ok(())
    }
}

/// A complete instance: `n` identical sensors, observation model, prior and
/// costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub model: SensorModel,
    pub prior: ChangePrior,
    pub costs: Costs,
    pub n: usize,
}

impl Problem {
    pub fn new(model: SensorModel, prior: ChangePrior, costs: Costs, n: usize) -> Result<Self> {
        let problem = Self {
            model,
            prior,
            costs,
            n,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prior.validate()?;
        self.costs.validate()?;
        if self.n == 0 {
            return Err(invalid("n", "need at least one sensor"));
        }
        Ok(())
    }

    /// The ten-sensor Gaussian instance used throughout the examples:
    /// `f0 = N(0,1)`, `f1 = N(1,1)`, `T ~ geometric(0.01)`, `pi_0 = 0`,
    /// `lambda_s = 0.5`, `lambda_f = 100`.
    pub fn reference() -> Self {
        Self {
            model: SensorModel::unit_shift(),
            prior: ChangePrior { rho: 0.0, p: 0.01 },
            costs: Costs {
                lambda_s: 0.5,
                lambda_f: 100.0,
            },
            n: 10,
        }
    }

    /// Starting belief `pi_0 = rho`.
    pub fn initial_belief(&self) -> f64 {
        self.prior.rho
    }

    pub fn with_lambda_s(mut self, lambda_s: f64) -> Self {
        self.costs.lambda_s = lambda_s;
        self
    }

    pub fn with_lambda_f(mut self, lambda_f: f64) -> Self {
        self.costs.lambda_f = lambda_f;
        self
    }
}
