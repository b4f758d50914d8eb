//! Noise calibration tables for the two reference deployments.

use clap::ValueEnum;
use privlora_core::accountant::{build_report, calibrate_sigma, AccountantReport};
use privlora_core::Execution;
use serde::Serialize;

use crate::error::Result;
use crate::io::{csv_bytes, num};

/// Federated setups whose calibration is tabulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// 149 training clients, p = 0.05, 20 rounds.
    Llama,
    /// 285 training clients, p = 1, 4 rounds.
    Qwen,
}

impl Profile {
    pub fn train_samples(self) -> usize {
        match self {
            Profile::Llama => 149,
            Profile::Qwen => 285,
        }
    }

    pub fn p(self) -> f64 {
        match self {
            Profile::Llama => 0.05,
            Profile::Qwen => 1.0,
        }
    }

    pub fn rounds(self) -> usize {
        match self {
            Profile::Llama => 20,
            Profile::Qwen => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DeltaMode {
    /// `δ = 1/N` with `N` the number of training samples.
    OneOverN,
    /// `δ = 1e-5`.
    Fixed,
}

impl DeltaMode {
    pub fn delta(self, profile: Profile) -> f64 {
        match self {
            DeltaMode::OneOverN => 1.0 / profile.train_samples() as f64,
            DeltaMode::Fixed => 1e-5,
        }
    }
}

pub const DEFAULT_EPSILONS: [f64; 6] = [8.0, 4.0, 2.0, 1.0, 0.5, 0.25];

/// One row per target ε plus a leading noiseless row.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub profile: Profile,
    pub delta: f64,
    pub targets: Vec<f64>,
    pub report: AccountantReport,
}

pub fn calibrate(profile: Profile, delta_mode: DeltaMode, epsilons: &[f64], exec: Execution) -> Result<Calibration> {
    let delta = delta_mode.delta(profile);
    let mut targets = vec![f64::INFINITY];
    let mut sigmas = vec![0.0];
    for &eps in epsilons {
        sigmas.push(calibrate_sigma(eps, delta, profile.p(), profile.rounds())?);
        targets.push(eps);
    }
    let report = build_report(&sigmas, profile.p(), profile.rounds(), delta, exec)?;
    // Rows come back sorted by σ, which is the reverse order of the targets.
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&i, &j| sigmas[i].total_cmp(&sigmas[j]));
    let targets = order.into_iter().map(|i| targets[i]).collect();
    Ok(Calibration {
        profile,
        delta,
        targets,
        report,
    })
}

#[derive(Serialize)]
struct TableRow {
    target_epsilon: String,
    sigma: String,
    gdp_epsilon: String,
    rdp_epsilon_standard: String,
    rdp_epsilon_improved: String,
    rdp_epsilon_best: String,
}

#[derive(Serialize)]
struct TraceRow {
    sigma: String,
    round: usize,
    cumulative_rdp_epsilon: String,
}

impl Calibration {
    pub fn table_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(self.targets.iter().zip(&self.report.rows).map(|(&t, r)| TableRow {
            target_epsilon: num(t),
            sigma: num(r.sigma),
            gdp_epsilon: num(r.gdp_eps),
            rdp_epsilon_standard: num(r.rdp_eps_standard),
            rdp_epsilon_improved: num(r.rdp_eps_improved),
            rdp_epsilon_best: num(r.rdp_eps_best()),
        }))
    }

    pub fn trace_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(self.report.trace.iter().map(|t| TraceRow {
            sigma: num(t.sigma),
            round: t.round,
            cumulative_rdp_epsilon: num(t.cumulative_rdp_eps),
        }))
    }
}
