//! σ ↔ ε comparison tables and per-round accumulation traces.

use serde::Serialize;

use super::gdp::{gdp_epsilon_or_zero, gdp_mu};
use super::rdp::{default_orders, Conversion, RdpCurve};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReportRow {
    pub sigma: f64,
    pub rdp_eps_standard: f64,
    pub rdp_eps_improved: f64,
    pub gdp_eps: f64,
}

impl ReportRow {
    /// The tighter of the two RDP conversions.
    pub fn rdp_eps_best(&self) -> f64 {
        self.rdp_eps_standard.min(self.rdp_eps_improved)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub sigma: f64,
    pub round: usize,
    /// Improved-conversion RDP ε after `round` compositions.
    pub cumulative_rdp_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountantReport {
    pub p: f64,
    pub rounds: usize,
    pub delta: f64,
    pub rows: Vec<ReportRow>,
    pub trace: Vec<TracePoint>,
}

fn row_for(sigma: f64, p: f64, rounds: usize, delta: f64) -> Result<(ReportRow, Vec<TracePoint>)> {
    if sigma == 0.0 {
        let row = ReportRow {
            sigma,
            rdp_eps_standard: f64::INFINITY,
            rdp_eps_improved: f64::INFINITY,
            gdp_eps: f64::INFINITY,
        };
        let trace = (1..=rounds)
            .map(|round| TracePoint {
                sigma,
                round,
                cumulative_rdp_eps: f64::INFINITY,
            })
            .collect();
        return Ok((row, trace));
    }
    let curve = RdpCurve::subsampled_gaussian(default_orders(), sigma, p)?;
    let gdp = gdp_epsilon_or_zero(gdp_mu(sigma, p, rounds)?, delta)?;
    let row = ReportRow {
        sigma,
        rdp_eps_standard: curve.epsilon(rounds, delta, Conversion::Standard)?,
        rdp_eps_improved: curve.epsilon(rounds, delta, Conversion::Improved)?,
        gdp_eps: gdp,
    };
    let trace = (1..=rounds)
        .map(|round| {
            Ok(TracePoint {
                sigma,
                round,
                cumulative_rdp_eps: curve.epsilon(round, delta, Conversion::Improved)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((row, trace))
}

/// Evaluates both accountants at each σ. Rows come back sorted by σ.
pub fn build_report(
    sigmas: &[f64],
    p: f64,
    rounds: usize,
    delta: f64,
    exec: Execution,
) -> Result<AccountantReport> {
    if !(p > 0.0 && p <= 1.0) || rounds == 0 || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param("report needs p in (0,1], rounds >= 1, delta in (0,1)"));
    }
    if let Some(bad) = sigmas.iter().find(|s| s.is_nan() || **s < 0.0) {
        return Err(Error::param(format!("invalid sigma {bad}")));
    }
    let mut sorted = sigmas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let results = exec.map(&sorted, |&s| row_for(s, p, rounds, delta));
    let mut rows = Vec::with_capacity(sorted.len());
    let mut trace = Vec::new();
    for r in results {
        let (row, t) = r?;
        rows.push(row);
        trace.extend(t);
    }
    Ok(AccountantReport {
        p,
        rounds,
        delta,
        rows,
        trace,
    })
}
