//! On-disk forms of a simulation: per-round CSV, JSON summary and the
//! multi-run report.

use privlora_core::fed::{CodecMode, FedConfig, FedRunRecord, Privacy, RunStatus};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::{csv_bytes, num};

/// ε label of a run: the budget, `inf` without noise, or the multiplier.
pub fn epsilon_label(privacy: &Privacy) -> String {
    match *privacy {
        Privacy::Budget { epsilon, .. } => num(epsilon),
        Privacy::FixedSigma { sigma, .. } if sigma == 0.0 => "inf".into(),
        Privacy::FixedSigma { sigma, .. } => format!("sigma={}", num(sigma)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecLoss {
    pub initial: f64,
    pub r#final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub config_hash: String,
    pub mode: CodecMode,
    pub epsilon: String,
    pub seed: u64,
    pub sigma: f64,
    pub status: RunStatus,
    pub rounds_run: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    /// Eval accuracy after each round.
    pub accuracy_trace: Vec<f64>,
    /// Cumulative ε after the last round, as text so `inf` survives.
    pub final_gdp_epsilon: String,
    pub final_rdp_epsilon: String,
    pub pretrain_scalars: usize,
    pub codec_loss: Option<CodecLoss>,
    pub payload_bytes: usize,
}

impl RunSummary {
    pub fn new(cfg: &FedConfig, hash: &str, rec: &FedRunRecord) -> Self {
        let last = rec.rounds.last();
        Self {
            config_hash: hash.to_owned(),
            mode: cfg.codec.mode,
            epsilon: epsilon_label(&cfg.privacy),
            seed: cfg.seed,
            sigma: rec.sigma,
            status: rec.status,
            rounds_run: rec.rounds.len(),
            initial_accuracy: rec.initial_accuracy,
            final_accuracy: rec.final_accuracy(),
            accuracy_trace: rec.rounds.iter().map(|r| r.eval_accuracy).collect(),
            final_gdp_epsilon: num(last.map_or(0.0, |r| r.gdp_epsilon)),
            final_rdp_epsilon: num(last.map_or(0.0, |r| r.rdp_epsilon)),
            pretrain_scalars: rec.pretrain_scalars,
            codec_loss: rec.codec_loss.map(|(initial, f)| CodecLoss { initial, r#final: f }),
            payload_bytes: rec.rounds.iter().map(|r| r.payload_bytes).sum(),
        }
    }
}

#[derive(Serialize)]
struct RoundRow {
    round: usize,
    selected_count: usize,
    selected: String,
    failed: String,
    train_loss: String,
    eval_accuracy: String,
    eval_loss: String,
    steps: usize,
    gdp_epsilon: String,
    rdp_epsilon: String,
    payload_bytes: usize,
}

fn ids(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn rounds_csv(rec: &FedRunRecord) -> Result<Vec<u8>> {
    csv_bytes(rec.rounds.iter().map(|r| RoundRow {
        round: r.round,
        selected_count: r.selected.len(),
        selected: ids(&r.selected),
        failed: ids(&r.failed),
        train_loss: r.train_loss.map(num).unwrap_or_default(),
        eval_accuracy: num(r.eval_accuracy),
        eval_loss: num(r.eval_loss),
        steps: r.steps,
        gdp_epsilon: num(r.gdp_epsilon),
        rdp_epsilon: num(r.rdp_epsilon),
        payload_bytes: r.payload_bytes,
    }))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Orders ε labels: numbers descending with `inf` first, then the
/// fixed-multiplier runs by name.
fn label_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => y.total_cmp(&x),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub mode: String,
    pub epsilon: String,
    pub runs: usize,
    pub median_final_accuracy: f64,
    pub min_final_accuracy: f64,
    pub max_final_accuracy: f64,
    pub median_initial_accuracy: f64,
    pub median_rounds_run: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub mode: String,
    pub epsilon: String,
    pub round: usize,
    pub runs: usize,
    pub median_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
}

fn mode_name(mode: CodecMode) -> String {
    serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Merges runs into one row per (mode, ε) with medians and spread, plus
/// per-round accuracy curves.
pub fn build_report(runs: &[RunSummary]) -> Result<(Vec<ReportRow>, Vec<CurveRow>)> {
    if runs.is_empty() {
        return Err(CliError::config("report needs at least one run summary"));
    }
    let mut groups: Vec<((String, String), Vec<&RunSummary>)> = Vec::new();
    for r in runs {
        let key = (mode_name(r.mode), r.epsilon.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups.sort_by(|(a, _), (b, _)| a.0.cmp(&b.0).then_with(|| label_cmp(&a.1, &b.1)));
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for ((mode, label), members) in &groups {
        let mut fin: Vec<f64> = members.iter().map(|r| r.final_accuracy).collect();
        let mut init: Vec<f64> = members.iter().map(|r| r.initial_accuracy).collect();
        let mut len: Vec<f64> = members.iter().map(|r| r.rounds_run as f64).collect();
        rows.push(ReportRow {
            mode: mode.clone(),
            epsilon: label.clone(),
            runs: members.len(),
            median_final_accuracy: median(&mut fin),
            min_final_accuracy: fin[0],
            max_final_accuracy: fin[fin.len() - 1],
            median_initial_accuracy: median(&mut init),
            median_rounds_run: median(&mut len),
        });
        let longest = members.iter().map(|r| r.accuracy_trace.len()).max().unwrap_or(0);
        for round in 0..longest {
            let mut at: Vec<f64> = members.iter().filter_map(|r| r.accuracy_trace.get(round).copied()).collect();
            curves.push(CurveRow {
                mode: mode.clone(),
                epsilon: label.clone(),
                round,
                runs: at.len(),
                median_accuracy: median(&mut at),
                min_accuracy: at[0],
                max_accuracy: at[at.len() - 1],
            });
        }
    }
    Ok((rows, curves))
}
