//! Standard normal CDF, quantile and log-CDF.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{PI, SQRT_2};

/// `Φ(x)`
pub fn cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * erfc(-x / SQRT_2)
}

/// `Φ⁻¹(p)`, with `±∞` at the endpoints.
pub fn quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    // The inverse-erfc approximation is only good to ~1e-9 in the tails;
    // polish with Newton steps against the accurate CDF.
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    for _ in 0..3 {
        let density = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
        if density == 0.0 {
            break;
        }
        let step = (cdf(x) - p) / density;
        if !step.is_finite() {
            break;
        }
        x -= step;
    }
    x
}

/// `ln Φ(x)`, accurate deep into the lower tail where `Φ` underflows.
pub fn log_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * erfc(x / SQRT_2)).ln_1p()
    } else if x > -30.0 {
        (0.5 * erfc(-x / SQRT_2)).ln()
    } else {
        // Asymptotic expansion of the Mills ratio.
        let z2 = 1.0 / (x * x);
        let mut term = 1.0;
        let mut series = 1.0;
        for k in 1..8 {
            term *= -((2 * k - 1) as f64) * z2;
            series += term;
        }
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    }
}

/// `ln erfc(x)`
pub(crate) fn log_erfc(x: f64) -> f64 {
    std::f64::consts::LN_2 + log_cdf(-x * SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert!((cdf(-1.0) - 0.158_655_253_931_457_05).abs() < 1e-15);
        assert_eq!(cdf(0.0), 0.5);
        assert!((quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert_eq!(quantile(0.0), f64::NEG_INFINITY);
        assert_eq!(quantile(1.0), f64::INFINITY);
    }

    #[test]
    fn quantile_inverts_cdf() {
        // Above ~4 the probability itself rounds near 1 and x is ill-conditioned.
        for i in 1..150 {
            let x = -8.0 + 0.08 * i as f64;
            let back = quantile(cdf(x));
            assert!((back - x).abs() < 1e-9 * (1.0 + x.abs()), "{x} -> {back}");
        }
    }

    #[test]
    fn log_cdf_is_continuous_across_branches() {
        for &x in &[-29.999, -30.0, -30.001] {
            let lhs = log_cdf(x);
            let rhs = (0.5 * erfc(-x / SQRT_2)).ln();
            assert!((lhs - rhs).abs() < 1e-9 * rhs.abs(), "{x}: {lhs} vs {rhs}");
        }
        assert!(log_cdf(-100.0).is_finite());
        assert!(log_cdf(-100.0) < -5000.0);
        assert!((log_cdf(3.0) - cdf(3.0).ln()).abs() < 1e-15);
    }
}
