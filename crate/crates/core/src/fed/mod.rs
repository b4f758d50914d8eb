//! Federated simulation on the toy task.
//!
//! A run optionally starts with a pretraining phase in which clients share
//! per-epoch factor statistics (or, for the informative-prior ablation, the
//! factors themselves) and the server trains the codec. Each round then
//! samples clients, trains fresh adapters locally, pushes every adapted
//! weight through the mechanism and applies the decoded update. The run
//! stops at the round cap, when the next round would exceed the privacy
//! budget, or when the model diverges.

mod client;
mod task;

pub use client::{init_adapters, local_step, local_train, sample_clients, transmitted, ClientState, LocalConfig, LocalOutcome};
pub use task::{make_toy_task, Adapter, BatchGrad, Dataset, ToyModel, ToySpec, ToyTask};

use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, Accountant};
use crate::codec::{train_codec, train_codec_on_pairs, CodecArch, CodecLayout, CodecModel, CodecProfile, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lora::LoraGrad;
use crate::matrix::Matrix;
use crate::mechanism::{apply_update, Pipeline, ServerOrder};
use crate::rng::{self, Purpose};
use crate::stats::{EstimatorHyper, GridShape, StatsBundle};

/// Which codec sits in front of the mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CodecMode {
    /// Plain LoRA: factors are transmitted as they are.
    None,
    /// Identity codec fixture; numerically the same as `None`.
    Identity,
    /// Codec pretrained on synthetic factors from shared statistics.
    #[default]
    RandomPrior,
    /// Codec pretrained on the clients' real factors.
    RealGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSettings {
    pub mode: CodecMode,
    pub profile: CodecProfile,
    pub layout: CodecLayout,
    /// Overrides the profile's default hidden width.
    #[serde(default)]
    pub hidden: Option<usize>,
    pub train: TrainConfig,
    /// Local epochs whose statistics are shared before round one.
    pub pretrain_epochs: usize,
    pub hyper: EstimatorHyper,
    pub server_order: ServerOrder,
}

impl Default for CodecSettings {
    fn default() -> Self {
        Self {
            mode: CodecMode::default(),
            profile: CodecProfile::MlpDesk,
            layout: CodecLayout::Stacked,
            hidden: None,
            train: TrainConfig {
                steps: 400,
                ..TrainConfig::default()
            },
            pretrain_epochs: 2,
            hyper: EstimatorHyper::default(),
            server_order: ServerOrder::default(),
        }
    }
}

impl CodecSettings {
    pub fn arch(&self, n: usize, r: usize) -> Result<CodecArch> {
        let profile = match self.mode {
            CodecMode::None | CodecMode::Identity => CodecProfile::Identity,
            _ => self.profile,
        };
        let layout = if profile == CodecProfile::Identity {
            CodecLayout::Stacked
        } else {
            self.layout
        };
        let arch = CodecArch::new(profile, layout, n, r)?;
        match self.hidden {
            Some(h) if profile == CodecProfile::MlpDesk => arch.with_hidden(h),
            _ => Ok(arch),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Privacy {
    /// Calibrate σ so that `rounds` compositions spend exactly `epsilon`, and
    /// stop before any round that would overspend.
    Budget { epsilon: f64, delta: f64 },
    /// Use a fixed multiplier; ε is reported but never enforced.
    FixedSigma { sigma: f64, delta: f64 },
}

impl Privacy {
    pub fn delta(&self) -> f64 {
        match *self {
            Privacy::Budget { delta, .. } | Privacy::FixedSigma { delta, .. } => delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub task: ToySpec,
    pub local: LocalConfig,
    pub codec: CodecSettings,
    pub privacy: Privacy,
    /// Selection probability per client per round.
    pub p: f64,
    /// Round cap.
    pub rounds: usize,
    /// Server step size `η` and its per-round multiplicative decay.
    pub server_lr: f64,
    pub server_lr_decay: f64,
    /// Clip bound per transmitted factor; `None` disables clipping.
    pub clip: Option<f64>,
    /// Whether rounds with no selected client still count as a composition.
    pub count_empty_rounds: bool,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            task: ToySpec::default(),
            local: LocalConfig::default(),
            codec: CodecSettings::default(),
            privacy: Privacy::Budget {
                epsilon: 8.0,
                delta: 1e-3,
            },
            p: 0.5,
            rounds: 10,
            server_lr: 1.0,
            server_lr_decay: 1.0,
            clip: Some(1.0),
            count_empty_rounds: false,
            seed: 0,
        }
    }
}

/// Tolerance on the budget check, absorbing bisection error in σ.
pub const BUDGET_SLACK: f64 = 1e-9;

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.local.validate()?;
        self.codec.train.validate()?;
        self.codec.hyper.validate()?;
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::param("selection probability must be in (0, 1]"));
        }
        if self.rounds == 0 {
            return Err(Error::param("at least one round is required"));
        }
        if !(self.server_lr > 0.0) || !(self.server_lr_decay > 0.0) {
            return Err(Error::param("server step size and decay must be positive"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::param("clip bound must be positive"));
            }
        }
        if self.codec.pretrain_epochs == 0 && matches!(self.codec.mode, CodecMode::RandomPrior | CodecMode::RealGradient) {
            return Err(Error::param("codec pretraining needs at least one epoch"));
        }
        match self.privacy {
            Privacy::Budget { epsilon, delta } => {
                if !(delta > 0.0 && delta < 1.0) {
                    return Err(Error::param(format!("budget delta must lie in (0, 1), got {delta}")));
                }
                if !(epsilon > 0.0) {
                    return Err(Error::Infeasible(format!("budget epsilon must be positive, got {epsilon}")));
                }
            }
            Privacy::FixedSigma { sigma, delta } => {
                if !(sigma >= 0.0) || !sigma.is_finite() || !(delta > 0.0 && delta < 1.0) {
                    return Err(Error::param("fixed sigma needs sigma >= 0 and delta in (0, 1)"));
                }
            }
        }
        self.codec.arch(self.task.n, self.local.rank)?;
        Ok(())
    }

    /// The noise multiplier used in every round.
    pub fn sigma(&self) -> Result<f64> {
        match self.privacy {
            Privacy::Budget { epsilon, delta } => {
                if epsilon.is_infinite() {
                    Ok(0.0)
                } else {
                    calibrate_sigma(epsilon, delta, self.p, self.rounds)
                }
            }
            Privacy::FixedSigma { sigma, .. } => Ok(sigma),
        }
    }

    fn budget(&self) -> Option<f64> {
        match self.privacy {
            Privacy::Budget { epsilon, .. } if epsilon.is_finite() => Some(epsilon),
            _ => None,
        }
    }

    pub fn server_lr_at(&self, round: usize) -> f64 {
        self.server_lr * self.server_lr_decay.powi(round as i32)
    }
}

/// Seed coordinate for the pretraining phase, disjoint from round indices.
const PRETRAIN_ROUND: u64 = u64::MAX;

/// Output of the pretraining phase.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub codec: CodecModel,
    /// Statistics received from each client (random-prior mode only).
    pub stats: Vec<StatsBundle>,
    pub training: Option<TrainOutcome>,
    /// Scalars uploaded by all clients during pretraining.
    pub uploaded_scalars: usize,
}

/// Runs the statistics-sharing phase and trains the codec.
pub fn pretrain(cfg: &FedConfig, task: &ToyTask, exec: Execution) -> Result<Pretrained> {
    let arch = cfg.codec.arch(task.spec.n, cfg.local.rank)?;
    if matches!(cfg.codec.mode, CodecMode::None | CodecMode::Identity) {
        return Ok(Pretrained {
            codec: CodecModel::init(arch, 0)?,
            stats: Vec::new(),
            training: None,
            uploaded_scalars: 0,
        });
    }
    let local = LocalConfig {
        epochs: cfg.codec.pretrain_epochs,
        ..cfg.local
    };
    let ids: Vec<usize> = (0..task.spec.clients).collect();
    let snapshots = exec
        .map(&ids, |&id| {
            let state = ClientState {
                id,
                data: &task.train,
                shard: &task.shards[id],
            };
            local_train(&task.base, &state, &local, cfg.seed, PRETRAIN_ROUND, true).map(|o| o.snapshots)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let train_cfg = TrainConfig {
        seed: rng::derive_seed(cfg.seed, Purpose::CodecInit, &[]),
        ..cfg.codec.train
    };
    let shape = GridShape::new(task.spec.layers, task.spec.modules, local.epochs);
    match cfg.codec.mode {
        CodecMode::RandomPrior => {
            let mut stats = Vec::with_capacity(snapshots.len());
            for (id, per_epoch) in snapshots.iter().enumerate() {
                let mut b = StatsBundle::new(cfg.codec.hyper, shape)?;
                b.client = Some(id);
                for epoch in per_epoch {
                    b.ingest_epoch(epoch)?;
                }
                stats.push(b);
            }
            let uploaded = stats.iter().map(StatsBundle::scalar_count).sum();
            let out = train_codec(arch, &stats, &train_cfg, exec)?;
            Ok(Pretrained {
                codec: out.model.clone(),
                stats,
                training: Some(out),
                uploaded_scalars: uploaded,
            })
        }
        CodecMode::RealGradient => {
            let pairs: Vec<(Matrix, Matrix)> = snapshots
                .iter()
                .flatten()
                .flatten()
                .map(|g: &LoraGrad| (g.a.clone(), g.b.clone()))
                .collect();
            let uploaded = pairs.iter().map(|(a, b)| a.len() + b.len()).sum();
            let out = train_codec_on_pairs(arch, &pairs, &train_cfg, exec)?;
            Ok(Pretrained {
                codec: out.model.clone(),
                stats: Vec::new(),
                training: Some(out),
                uploaded_scalars: uploaded,
            })
        }
        CodecMode::None | CodecMode::Identity => unreachable!("handled above"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    BudgetExhausted,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<usize>,
    /// Clients whose local training failed and were dropped this round.
    pub failed: Vec<usize>,
    /// Mean final-epoch local loss over participating clients.
    pub train_loss: Option<f64>,
    pub eval_accuracy: f64,
    pub eval_loss: f64,
    /// Compositions charged so far.
    pub steps: usize,
    pub gdp_epsilon: f64,
    pub rdp_epsilon: f64,
    pub payload_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedRunRecord {
    pub sigma: f64,
    pub status: RunStatus,
    pub initial_accuracy: f64,
    pub rounds: Vec<RoundRecord>,
    pub final_model: ToyModel,
    pub pretrain_scalars: usize,
    /// Held-out codec loss before and after pretraining, if trained.
    pub codec_loss: Option<(f64, f64)>,
}

impl FedRunRecord {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(self.initial_accuracy, |r| r.eval_accuracy)
    }
}

/// Bytes per transmitted scalar in payload accounting.
pub const BYTES_PER_SCALAR: usize = 8;

/// Server-side state of a run.
pub struct FedSystem {
    pub cfg: FedConfig,
    pub task: ToyTask,
    pub server: ToyModel,
    pub codec: CodecModel,
    pub sigma: f64,
    pub accountant: Accountant,
}

/// What a round did.
#[derive(Debug, Clone)]
pub enum RoundOutcome {
    Applied(RoundRecord),
    /// The round would push ε past the budget; nothing was applied.
    OverBudget,
    Diverged(RoundRecord),
}

impl FedSystem {
    /// Builds the task and accountant around an already trained codec.
    pub fn new(cfg: &FedConfig, task: ToyTask, codec: CodecModel) -> Result<Self> {
        cfg.validate()?;
        codec.validate()?;
        if codec.arch.n != task.spec.n || codec.arch.r != cfg.local.rank {
            return Err(Error::dim("codec shape does not match the model's adapters"));
        }
        let sigma = cfg.sigma()?;
        Ok(Self {
            cfg: cfg.clone(),
            server: task.base.clone(),
            task,
            codec,
            sigma,
            accountant: Accountant::new(sigma, cfg.p, cfg.privacy.delta())?,
        })
    }

    fn record(&self, round: usize, selected: Vec<usize>, failed: Vec<usize>, train_loss: Option<f64>, payload_bytes: usize) -> Result<RoundRecord> {
        let (acc, loss) = self.server.evaluate(&self.task.eval)?;
        let spent = self.accountant.spent()?;
        Ok(RoundRecord {
            round,
            selected,
            failed,
            train_loss,
            eval_accuracy: acc,
            eval_loss: loss,
            steps: spent.steps,
            gdp_epsilon: spent.gdp_epsilon,
            rdp_epsilon: spent.rdp_epsilon,
            payload_bytes,
        })
    }

    /// Executes round `round` (0-based).
    pub fn run_round(&mut self, round: usize, exec: Execution) -> Result<RoundOutcome> {
        let cfg = &self.cfg;
        let mut sel_rng = rng::stream(cfg.seed, Purpose::Selection, &[round as u64]);
        let selected = sample_clients(cfg.task.clients, cfg.p, &mut sel_rng)?;
        if selected.is_empty() {
            if cfg.count_empty_rounds {
                if self.over_budget()? {
                    return Ok(RoundOutcome::OverBudget);
                }
                self.accountant.advance();
            }
            return Ok(RoundOutcome::Applied(self.record(round, selected, Vec::new(), None, 0)?));
        }
        if self.over_budget()? {
            return Ok(RoundOutcome::OverBudget);
        }

        let server = &self.server;
        let task = &self.task;
        let outcomes = exec.map(&selected, |&id| {
            let state = ClientState {
                id,
                data: &task.train,
                shard: &task.shards[id],
            };
            local_train(server, &state, &cfg.local, cfg.seed, round as u64, false)
        });
        let mut ok = Vec::with_capacity(selected.len());
        let mut failed = Vec::new();
        for (&id, out) in selected.iter().zip(outcomes) {
            match out {
                Ok(o) => ok.push((id, o)),
                Err(e) => {
                    log::warn!("client {id} dropped in round {round}: {e}");
                    failed.push(id);
                }
            }
        }
        let train_loss = if ok.is_empty() {
            None
        } else {
            Some(ok.iter().map(|(_, o)| o.loss).sum::<f64>() / ok.len() as f64)
        };
        let mut payload = 0;
        if !ok.is_empty() {
            let pipeline = Pipeline {
                codec: &self.codec,
                clip: cfg.clip.unwrap_or(f64::INFINITY),
                sigma: self.sigma,
                seed: cfg.seed,
                order: cfg.codec.server_order,
            };
            let eta = cfg.server_lr_at(round);
            let mut updated = Vec::with_capacity(self.server.slots());
            for slot in 0..self.server.slots() {
                let inputs: Vec<(usize, &LoraGrad)> = ok.iter().map(|(id, o)| (*id, &o.update[slot])).collect();
                let g = pipeline.run(&inputs, round, slot, exec)?;
                updated.push(apply_update(&self.server.weights[slot], &g, eta)?);
            }
            self.server.weights = updated;
            payload = ok.len() * self.server.slots() * self.codec.arch.latent_dim * BYTES_PER_SCALAR;
        }
        // Selection already happened, so the round is charged even if every
        // selected client dropped out.
        self.accountant.advance();

        let diverged = !self.server.is_finite();
        let rec = if diverged {
            RoundRecord {
                round,
                selected,
                failed,
                train_loss,
                eval_accuracy: f64::NAN,
                eval_loss: f64::NAN,
                steps: self.accountant.steps(),
                gdp_epsilon: f64::NAN,
                rdp_epsilon: f64::NAN,
                payload_bytes: payload,
            }
        } else {
            self.record(round, selected, failed, train_loss, payload)?
        };
        if diverged || !rec.eval_loss.is_finite() {
            return Ok(RoundOutcome::Diverged(rec));
        }
        Ok(RoundOutcome::Applied(rec))
    }

    fn over_budget(&self) -> Result<bool> {
        match self.cfg.budget() {
            Some(eps) => Ok(self.accountant.spent_after(self.accountant.steps() + 1)?.gdp_epsilon > eps + BUDGET_SLACK),
            None => Ok(false),
        }
    }

    /// Runs rounds until the cap, the budget or divergence stops the run.
    pub fn run(mut self, exec: Execution) -> Result<FedRunRecord> {
        let (initial_accuracy, _) = self.server.evaluate(&self.task.eval)?;
        let mut rounds = Vec::new();
        let mut status = RunStatus::Completed;
        for t in 0..self.cfg.rounds {
            match self.run_round(t, exec)? {
                RoundOutcome::Applied(r) => rounds.push(r),
                RoundOutcome::OverBudget => {
                    status = RunStatus::BudgetExhausted;
                    break;
                }
                RoundOutcome::Diverged(r) => {
                    rounds.push(r);
                    status = RunStatus::Diverged;
                    break;
                }
            }
        }
        Ok(FedRunRecord {
            sigma: self.sigma,
            status,
            initial_accuracy,
            rounds,
            final_model: self.server,
            pretrain_scalars: 0,
            codec_loss: None,
        })
    }
}

/// Full run: task, pretraining, rounds.
pub fn run(cfg: &FedConfig, exec: Execution) -> Result<FedRunRecord> {
    cfg.validate()?;
    let task = make_toy_task(&cfg.task, cfg.seed)?;
    let pre = pretrain(cfg, &task, exec)?;
    let system = FedSystem::new(cfg, task, pre.codec)?;
    let mut record = system.run(exec)?;
    record.pretrain_scalars = pre.uploaded_scalars;
    record.codec_loss = pre.training.map(|t| (t.initial_loss, t.final_loss));
    Ok(record)
}
