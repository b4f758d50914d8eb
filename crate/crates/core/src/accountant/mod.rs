//! Privacy accounting.
//!
//! The primary accountant is μ-GDP: each round is `G_{1/σ}`, rounds compose
//! under Poisson subsampling through the CLT to `G_μ` with
//! `μ = p√T·√(e^{1/σ²} - 1)`, and μ maps to (ε, δ) through the GDP dual.
//! An RDP accountant over the same subsampled Gaussian is kept for
//! cross-checking.
//!
//! Both treat one round as a Gaussian mechanism with noise multiplier σ
//! against the aggregate's sensitivity `2/K`. The mechanism actually perturbs
//! each client's two factors before they are multiplied, so the product that
//! reaches the server is not itself a Gaussian perturbation of the aggregate;
//! the accounting here takes the Gaussian-aggregate view as an assumption.

mod gdp;
pub mod normal;
mod rdp;
mod report;

pub use gdp::{
    calibrate_sigma, classic_gaussian_sigma, gdp_delta, gdp_epsilon, gdp_epsilon_or_zero, gdp_mu,
    gdp_tradeoff, mu_for_budget, sigma_for_mu, ClassicSigma,
};
pub use rdp::{
    default_orders, rdp_compose, rdp_gaussian, rdp_subsampled, rdp_to_dp, Conversion, RdpCurve,
    RdpEpsilon,
};
pub use report::{build_report, AccountantReport, ReportRow, TracePoint};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full set of privacy parameters for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
    pub sigma: f64,
    /// Poisson sampling rate.
    pub p: f64,
    pub rounds: usize,
    /// Expected number of selected clients.
    pub selected: usize,
    pub population: usize,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::param("delta must lie in (0, 1)"));
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::param("sampling rate must lie in (0, 1]"));
        }
        if self.rounds == 0 {
            return Err(Error::param("at least one round is required"));
        }
        if self.selected == 0 || self.selected > self.population {
            return Err(Error::param("need 1 <= selected <= population"));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(Error::param("sigma must be non-negative"));
        }
        Ok(())
    }

    /// `ν = p√T`
    pub fn nu(&self) -> f64 {
        self.p * (self.rounds as f64).sqrt()
    }
}

/// Running accountant advanced once per composed round.
#[derive(Debug, Clone)]
pub struct Accountant {
    sigma: f64,
    p: f64,
    delta: f64,
    steps: usize,
    curve: Option<RdpCurve>,
}

/// Cumulative privacy loss after some number of rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spent {
    pub steps: usize,
    pub gdp_mu: f64,
    pub gdp_epsilon: f64,
    pub rdp_epsilon: f64,
}

impl Accountant {
    pub fn new(sigma: f64, p: f64, delta: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::param("sampling rate must lie in (0, 1]"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::param("delta must lie in (0, 1)"));
        }
        let curve = if sigma > 0.0 && sigma.is_finite() {
            Some(RdpCurve::subsampled_gaussian(default_orders(), sigma, p)?)
        } else {
            None
        };
        Ok(Self {
            sigma,
            p,
            delta,
            steps: 0,
            curve,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn advance(&mut self) {
        self.steps += 1;
    }

    /// Loss after `steps` rounds.
    pub fn spent_after(&self, steps: usize) -> Result<Spent> {
        if steps == 0 {
            return Ok(Spent {
                steps,
                gdp_mu: 0.0,
                gdp_epsilon: 0.0,
                rdp_epsilon: 0.0,
            });
        }
        if self.sigma.is_infinite() {
            return Ok(Spent {
                steps,
                gdp_mu: 0.0,
                gdp_epsilon: 0.0,
                rdp_epsilon: 0.0,
            });
        }
        let mu = gdp_mu(self.sigma, self.p, steps)?;
        let gdp_eps = gdp_epsilon_or_zero(mu, self.delta)?;
        let rdp_eps = match &self.curve {
            Some(c) => {
                let s = c.epsilon(steps, self.delta, Conversion::Standard)?;
                let i = c.epsilon(steps, self.delta, Conversion::Improved)?;
                s.min(i)
            }
            None => f64::INFINITY,
        };
        Ok(Spent {
            steps,
            gdp_mu: mu,
            gdp_epsilon: gdp_eps,
            rdp_epsilon: rdp_eps,
        })
    }

    pub fn spent(&self) -> Result<Spent> {
        self.spent_after(self.steps)
    }
}
