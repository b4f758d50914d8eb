//! Codec pretraining on synthetic gradients with a squared-ℓ2
//! reconstruction objective and plain SGD.

use serde::{Deserialize, Serialize};

use super::net::Gradients;
use super::synth::SyntheticSource;
use super::{pack, CodecArch, CodecModel};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::matrix::Matrix;
use crate::stats::StatsBundle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Number of fixed synthetic pairs used to report held-out loss.
    pub holdout: usize,
    /// Supplied by the caller (derived from the run seed), never from config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            batch: 8,
            holdout: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("codec training needs at least one step"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::param(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.holdout == 0 {
            return Err(Error::param("batch and holdout sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CodecModel,
    /// Mean held-out loss before the first step.
    pub initial_loss: f64,
    /// Mean held-out loss after the last step.
    pub final_loss: f64,
    /// Mean training-batch loss per step.
    pub history: Vec<f64>,
}

/// `‖Dec(Enc([A | Bᵀ])) − [A | Bᵀ]‖²` summed over every block.
pub fn reconstruction_loss(model: &CodecModel, a: &Matrix, b: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for x in pack(&model.arch, a, b)? {
        let y = model.reconstruct_block(&x)?;
        total += y.iter().zip(&x).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    }
    Ok(total)
}

/// Loss of one pair and its parameter gradients, scaled by `weight`.
fn loss_and_gradients(model: &CodecModel, a: &Matrix, b: &Matrix, weight: f64) -> Result<(f64, Gradients, Gradients)> {
    let mut ge = model.encoder.zero_gradients();
    let mut gd = model.decoder.zero_gradients();
    let mut loss = 0.0;
    for x in pack(&model.arch, a, b)? {
        let enc = model.encoder.forward_trace(&x)?;
        let dec = model.decoder.forward_trace(enc.last().expect("non-empty trace"))?;
        let y = dec.last().expect("non-empty trace");
        let mut gy = Vec::with_capacity(y.len());
        for (p, q) in y.iter().zip(&x) {
            loss += (p - q).powi(2);
            gy.push(2.0 * weight * (p - q));
        }
        let gz = model.decoder.backward(&dec, &gy, &mut gd);
        model.encoder.backward(&enc, &gz, &mut ge);
    }
    Ok((loss, ge, gd))
}

fn add_into(acc: &mut Gradients, g: &Gradients) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn all_finite(g: &Gradients) -> bool {
    g.iter().all(|l| l.iter().all(|v| v.is_finite()))
}

const HOLDOUT_STREAM: u64 = u64::MAX;

/// Where training pairs come from.
enum Source<'a> {
    Synthetic(SyntheticSource),
    /// Real factor pairs, drawn uniformly with replacement.
    Recorded(&'a [(Matrix, Matrix)]),
}

impl Source<'_> {
    fn draw(&self, seed: u64, coords: &[u64]) -> (Matrix, Matrix) {
        match self {
            Source::Synthetic(s) => s.draw(seed, coords),
            Source::Recorded(pairs) => {
                use rand::Rng;
                let mut rng = crate::rng::stream(seed, crate::rng::Purpose::CodecBatch, coords);
                pairs[rng.random_range(0..pairs.len())].clone()
            }
        }
    }
}

fn holdout_loss(model: &CodecModel, holdout: &[(Matrix, Matrix)], exec: Execution) -> Result<f64> {
    let losses = exec.map(holdout, |(a, b)| reconstruction_loss(model, a, b));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / holdout.len() as f64)
}

/// Trains a fresh codec on the mixture of every received bundle.
///
/// Per-sample gradients may be computed in parallel; they are summed in
/// sample order, so the result does not depend on the execution mode.
pub fn train_codec(arch: CodecArch, stats: &[StatsBundle], cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    let source = SyntheticSource::new(stats, arch.n, arch.r)?;
    train(arch, &Source::Synthetic(source), cfg, exec)
}

/// Trains on recorded factor pairs instead of a statistical prior. This is
/// the informative-prior ablation; held-out pairs come from the same pool.
pub fn train_codec_on_pairs(arch: CodecArch, pairs: &[(Matrix, Matrix)], cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::param("no recorded pairs to train on"));
    }
    for (a, b) in pairs {
        if a.shape() != (arch.n, arch.r) || b.shape() != (arch.r, arch.n) {
            return Err(Error::dim("recorded pair does not match the codec shape"));
        }
    }
    train(arch, &Source::Recorded(pairs), cfg, exec)
}

fn train(arch: CodecArch, source: &Source<'_>, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    let mut model = CodecModel::init(arch, cfg.seed)?;

    let holdout: Vec<(Matrix, Matrix)> = (0..cfg.holdout)
        .map(|i| source.draw(cfg.seed, &[HOLDOUT_STREAM, i as u64]))
        .collect();
    let initial_loss = holdout_loss(&model, &holdout, exec)?;

    let weight = 1.0 / cfg.batch as f64;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let results = exec.map_range(cfg.batch, |i| {
            let (a, b) = source.draw(cfg.seed, &[step as u64, i as u64]);
            loss_and_gradients(&model, &a, &b, weight)
        });
        let mut ge = model.encoder.zero_gradients();
        let mut gd = model.decoder.zero_gradients();
        let mut loss = 0.0;
        for r in results {
            let (l, e, d) = r?;
            loss += l * weight;
            add_into(&mut ge, &e);
            add_into(&mut gd, &d);
        }
        if !loss.is_finite() || !all_finite(&ge) || !all_finite(&gd) {
            return Err(Error::TrainingDiverged {
                step,
                checkpoint: Box::new(model),
            });
        }
        let checkpoint = model.clone();
        model.encoder.sgd_step(&ge, cfg.lr);
        model.decoder.sgd_step(&gd, cfg.lr);
        if !model.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                checkpoint: Box::new(checkpoint),
            });
        }
        history.push(loss);
        if step % 500 == 0 {
            log::debug!("codec step {step}: batch loss {loss:.6e}");
        }
    }
    let final_loss = holdout_loss(&model, &holdout, exec)?;
    Ok(TrainOutcome {
        model,
        initial_loss,
        final_loss,
        history,
    })
}
