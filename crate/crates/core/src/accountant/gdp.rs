//! Gaussian differential privacy: per-step trade-off curve, CLT composition
//! under Poisson subsampling, the μ-GDP ↔ (ε, δ) dual, and σ calibration.

use super::normal::{cdf, log_cdf, quantile};
use crate::error::{Error, Result};

/// Per-step trade-off `G_{1/σ}(α) = Φ(Φ⁻¹(1-α) - 1/σ)`.
pub fn gdp_tradeoff(sigma: f64, alpha: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(cdf(quantile(1.0 - alpha) - 1.0 / sigma))
}

fn check_sampling(p: f64, rounds: usize) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param(format!("sampling rate must lie in (0, 1], got {p}")));
    }
    if rounds == 0 {
        return Err(Error::param("at least one round is required"));
    }
    Ok(())
}

/// CLT composition: `μ = p√T · √(e^{1/σ²} - 1)`. Returns `∞` for `σ = 0`.
pub fn gdp_mu(sigma: f64, p: f64, rounds: usize) -> Result<f64> {
    check_sampling(p, rounds)?;
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::param(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let nu = p * (rounds as f64).sqrt();
    Ok(nu * (1.0 / (sigma * sigma)).exp_m1().sqrt())
}

/// Inverse of [`gdp_mu`] in σ.
pub fn sigma_for_mu(mu: f64, p: f64, rounds: usize) -> Result<f64> {
    check_sampling(p, rounds)?;
    if !(mu > 0.0) {
        return Err(Error::param(format!("mu must be positive, got {mu}")));
    }
    if mu.is_infinite() {
        return Ok(0.0);
    }
    let nu = p * (rounds as f64).sqrt();
    let ratio = mu / nu;
    Ok(1.0 / (ratio * ratio).ln_1p().sqrt())
}

/// `δ(ε) = Φ(-ε/μ + μ/2) - e^ε Φ(-ε/μ - μ/2)`
pub fn gdp_delta(mu: f64, eps: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::param(format!("mu must be positive, got {mu}")));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::param(format!("epsilon must be non-negative, got {eps}")));
    }
    if mu.is_infinite() {
        return Ok(1.0);
    }
    if eps.is_infinite() {
        return Ok(0.0);
    }
    let a = -eps / mu + mu / 2.0;
    let b = -eps / mu - mu / 2.0;
    let d = cdf(a) - (eps + log_cdf(b)).exp();
    Ok(d.clamp(0.0, 1.0))
}

const MAX_BISECTIONS: usize = 400;

/// Bisection on a monotone predicate: returns the boundary between `lo`
/// (where `below(lo)` holds) and `hi`.
fn bisect(mut lo: f64, mut hi: f64, below: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi || hi - lo <= 1e-15 * hi.abs().max(1e-300) {
            break;
        }
        if below(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Smallest ε with `δ(ε) ≤ δ` for a μ-GDP mechanism.
///
/// Fails with [`Error::Infeasible`] when `δ ≥ δ(0)`, i.e. the requested δ is
/// already met at ε = 0 and there is no proper solution.
pub fn gdp_epsilon(mu: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param(format!("delta must lie in (0, 1), got {delta}")));
    }
    if mu.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let d0 = gdp_delta(mu, 0.0)?;
    if delta >= d0 {
        return Err(Error::Infeasible(format!(
            "delta {delta} is at or above delta(eps=0) = {d0} for mu = {mu}"
        )));
    }
    let mut hi = 1.0;
    while gdp_delta(mu, hi)? > delta {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::Infeasible(format!(
                "no epsilon below 1e8 reaches delta {delta} for mu = {mu}"
            )));
        }
    }
    Ok(bisect(0.0, hi, |e| gdp_delta(mu, e).map_or(false, |d| d > delta)))
}

/// [`gdp_epsilon`], mapping the "already satisfied at ε = 0" case to 0.
pub fn gdp_epsilon_or_zero(mu: f64, delta: f64) -> Result<f64> {
    match gdp_epsilon(mu, delta) {
        Err(Error::Infeasible(_)) if mu.is_finite() && gdp_delta(mu, 0.0)? <= delta => Ok(0.0),
        other => other,
    }
}

/// The μ for which a μ-GDP mechanism is exactly (ε, δ)-DP.
pub fn mu_for_budget(eps: f64, delta: f64) -> Result<f64> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Infeasible(format!("epsilon must be non-negative, got {eps}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Infeasible(format!("delta must lie in (0, 1), got {delta}")));
    }
    if eps.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let mut hi = 1.0;
    while gdp_delta(hi, eps)? < delta {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Infeasible(format!(
                "no mu reaches delta {delta} at epsilon {eps}"
            )));
        }
    }
    Ok(bisect(0.0, hi, |m| {
        m == 0.0 || gdp_delta(m, eps).map_or(false, |d| d < delta)
    }))
}

/// Noise multiplier that spends exactly (ε, δ) over `rounds` Poisson-sampled
/// rounds at rate `p`, under the CLT approximation.
pub fn calibrate_sigma(eps: f64, delta: f64, p: f64, rounds: usize) -> Result<f64> {
    check_sampling(p, rounds)?;
    let mu = mu_for_budget(eps, delta)?;
    sigma_for_mu(mu, p, rounds)
}

/// Classical Gaussian-mechanism calibration for sensitivity 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicSigma {
    /// `√(2 ln(1.25/δ)) / ε`
    pub standard: f64,
    /// `2 ln(1.25/δ) / ε`, the form without the square root.
    pub without_sqrt: f64,
    /// The classical theorem only holds for `ε < 1`.
    pub precondition_violated: bool,
}

pub fn classic_gaussian_sigma(eps: f64, delta: f64) -> Result<ClassicSigma> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("epsilon must be positive, got {eps}")));
    }
    if !(delta > 0.0 && delta <= 1.25) {
        return Err(Error::param(format!("delta must lie in (0, 1.25], got {delta}")));
    }
    let l = 2.0 * (1.25 / delta).ln();
    let precondition_violated = eps >= 1.0;
    if precondition_violated {
        log::warn!("classical Gaussian mechanism requires epsilon < 1, got {eps}");
    }
    Ok(ClassicSigma {
        standard: l.sqrt() / eps,
        without_sqrt: l / eps,
        precondition_violated,
    })
}
