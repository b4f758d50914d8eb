//! Command implementations. Each returns after writing its outputs; the
//! binary maps errors to exit codes.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use privlora_core::codec::{assemble, split_and_dispatch, CodecModel, DecoderArtifact, EncoderArtifact};
use privlora_core::fed::{self, local_train, make_toy_task, ClientState, FedConfig, FedSystem, RunStatus, ToyTask};
use privlora_core::Execution;
use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate, DeltaMode, Profile, DEFAULT_EPSILONS};
use crate::config::{codec_hash, RunConfig};
use crate::error::{CliError, Result};
use crate::histogram::{histograms, parse_log, Binning, LogEntry};
use crate::io;
use crate::payload::PayloadModel;
use crate::record::{build_report, rounds_csv, CodecLoss, RunSummary};

#[derive(Debug, Parser)]
#[command(name = "privlora", version, about = "Private federated LoRA fine-tuning toolkit")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate the noise multiplier for each target ε under both accountants.
    Calibrate(CalibrateArgs),
    /// Share statistics, train the codec and write its two halves.
    Pretrain(RunArgs),
    /// Run the federated simulation.
    Simulate(SimulateArgs),
    /// Merge run summaries into median rows per (mode, ε).
    Report(ReportArgs),
    /// Count the scalars uploaded for codec pretraining.
    Payload(PayloadArgs),
    /// Bin a gradient log into per-(layer, epoch, part) histograms.
    Histograms(HistogramArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, value_enum, default_value = "llama")]
    pub profile: Profile,
    #[arg(long, value_enum, default_value = "one-over-n")]
    pub delta_mode: DeltaMode,
    /// Target budgets, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EPSILONS)]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory written by `pretrain`; without it the codec is trained inline.
    #[arg(long)]
    pub codec_dir: Option<PathBuf>,
    /// Also write every client's per-epoch factors from round 0.
    #[arg(long)]
    pub log_gradients: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories or `summary.json` files.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PayloadArgs {
    #[arg(long, default_value_t = PayloadModel::LLAMA.n)]
    pub n: u64,
    #[arg(long, default_value_t = PayloadModel::LLAMA.r)]
    pub r: u64,
    #[arg(long, default_value_t = PayloadModel::LLAMA.modules)]
    pub modules: u64,
    #[arg(long, default_value_t = PayloadModel::LLAMA.layers)]
    pub layers: u64,
    #[arg(long, default_value_t = PayloadModel::LLAMA.epochs)]
    pub epochs: u64,
    #[arg(long, default_value_t = PayloadModel::LLAMA.bytes_per_scalar)]
    pub bytes_per_scalar: u64,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Odd number of bins.
    #[arg(long, default_value_t = 41)]
    pub bins: usize,
    /// Half-width of the binned interval; defaults to the largest magnitude.
    #[arg(long)]
    pub range: Option<f64>,
}

pub const ENCODER_FILE: &str = "encoder.json";
pub const DECODER_FILE: &str = "decoder.json";
pub const PRETRAIN_FILE: &str = "pretrain.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const MODEL_FILE: &str = "model.json";
pub const GRADIENT_LOG_FILE: &str = "gradients.jsonl";
pub const META_FILE: &str = "meta.json";

/// Timestamps live only in this sidecar so the primary outputs stay
/// byte-identical across re-runs.
fn write_meta(dir: &Path, command: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Meta<'a> {
        command: &'a str,
        version: &'a str,
        created_unix: u64,
    }
    let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    io::write_json(
        &dir.join(META_FILE),
        &Meta {
            command,
            version: env!("CARGO_PKG_VERSION"),
            created_unix,
        },
    )
}

pub fn run(cli: Cli) -> Result<String> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.command {
        Command::Calibrate(a) => cmd_calibrate(&a, exec),
        Command::Pretrain(a) => cmd_pretrain(&a, exec),
        Command::Simulate(a) => cmd_simulate(&a, exec),
        Command::Report(a) => cmd_report(&a),
        Command::Payload(a) => cmd_payload(&a),
        Command::Histograms(a) => cmd_histograms(&a),
    }
}

pub fn cmd_calibrate(a: &CalibrateArgs, exec: Execution) -> Result<String> {
    if a.epsilons.is_empty() {
        return Err(CliError::config("no target epsilons given"));
    }
    let c = calibrate(a.profile, a.delta_mode, &a.epsilons, exec)?;
    let table = c.table_csv()?;
    io::write(&a.out_dir.join("calibration.csv"), &table)?;
    io::write(&a.out_dir.join("calibration_trace.csv"), &c.trace_csv()?)?;
    write_meta(&a.out_dir, "calibrate")?;
    Ok(format!(
        "p = {}, rounds = {}, delta = {}\n{}",
        a.profile.p(),
        a.profile.rounds(),
        c.delta,
        String::from_utf8_lossy(&table)
    ))
}

/// Summary of the pretraining phase stored next to the codec halves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSummary {
    pub config_hash: String,
    pub uploaded_scalars: usize,
    pub codec_loss: Option<CodecLoss>,
    pub loss_history: Vec<f64>,
}

struct Prepared {
    cfg: FedConfig,
    hash: String,
    task: ToyTask,
    codec: CodecModel,
    summary: PretrainSummary,
}

fn pretrain_inline(cfg: FedConfig, exec: Execution) -> Result<(Prepared, Vec<privlora_core::stats::StatsBundle>)> {
    let hash = codec_hash(&cfg);
    let task = make_toy_task(&cfg.task, cfg.seed)?;
    let pre = fed::pretrain(&cfg, &task, exec)?;
    let summary = PretrainSummary {
        config_hash: hash.clone(),
        uploaded_scalars: pre.uploaded_scalars,
        codec_loss: pre.training.as_ref().map(|t| CodecLoss {
            initial: t.initial_loss,
            r#final: t.final_loss,
        }),
        loss_history: pre.training.as_ref().map(|t| t.history.clone()).unwrap_or_default(),
    };
    Ok((
        Prepared {
            cfg,
            hash,
            task,
            codec: pre.codec,
            summary,
        },
        pre.stats,
    ))
}

pub fn cmd_pretrain(a: &RunArgs, exec: Execution) -> Result<String> {
    let cfg = RunConfig::load(&a.config, a.seed)?.fed;
    let (p, stats) = pretrain_inline(cfg, exec)?;
    let (enc, dec) = split_and_dispatch(&p.codec, &p.hash);
    io::write(&a.out_dir.join(ENCODER_FILE), &enc.to_json()?)?;
    io::write(&a.out_dir.join(DECODER_FILE), &dec.to_json()?)?;
    for (id, s) in stats.iter().enumerate() {
        io::write(&a.out_dir.join("stats").join(format!("client_{id:03}.json")), &s.to_json()?)?;
    }
    io::write_json(&a.out_dir.join(PRETRAIN_FILE), &p.summary)?;
    write_meta(&a.out_dir, "pretrain")?;
    Ok(match &p.summary.codec_loss {
        Some(l) => format!(
            "codec {}: held-out loss {} -> {}, {} scalars uploaded\n",
            &p.hash[..12],
            l.initial,
            l.r#final,
            p.summary.uploaded_scalars
        ),
        None => format!("codec {}: no training needed for this mode\n", &p.hash[..12]),
    })
}

fn load_codec(cfg: FedConfig, dir: &Path) -> Result<Prepared> {
    let hash = codec_hash(&cfg);
    let enc = EncoderArtifact::from_json(&io::read(&dir.join(ENCODER_FILE))?)?;
    let dec = DecoderArtifact::from_json(&io::read(&dir.join(DECODER_FILE))?)?;
    let summary: PretrainSummary = privlora_core::json::from_slice(&io::read(&dir.join(PRETRAIN_FILE))?)?;
    for (what, h) in [("encoder", &enc.config_hash), ("decoder", &dec.config_hash), ("pretrain summary", &summary.config_hash)] {
        if *h != hash {
            return Err(CliError::config(format!(
                "{what} in {} was built for config {} but this config hashes to {}",
                dir.display(),
                &h[..h.len().min(12)],
                &hash[..12]
            )));
        }
    }
    let codec = assemble(&enc, &dec)?;
    let task = make_toy_task(&cfg.task, cfg.seed)?;
    Ok(Prepared {
        cfg,
        hash,
        task,
        codec,
        summary,
    })
}

/// Round-0 local training of every client on the broadcast base model,
/// recorded after each epoch.
fn gradient_log(cfg: &FedConfig, task: &ToyTask, exec: Execution) -> Result<Vec<u8>> {
    let ids: Vec<usize> = (0..task.spec.clients).collect();
    let outcomes = exec.map(&ids, |&id| {
        let state = ClientState {
            id,
            data: &task.train,
            shard: &task.shards[id],
        };
        local_train(&task.base, &state, &cfg.local, cfg.seed, 0, true)
    });
    let mut out = Vec::new();
    for (id, o) in ids.iter().zip(outcomes) {
        for (epoch, grads) in o?.snapshots.into_iter().enumerate() {
            for g in grads {
                for part in privlora_core::Part::BOTH {
                    let entry = LogEntry {
                        client: *id,
                        layer: g.layer,
                        module: g.module,
                        epoch,
                        part,
                        values: g.part(part).as_slice().to_vec(),
                    };
                    serde_json::to_writer(&mut out, &entry).map_err(|e| CliError::config(e.to_string()))?;
                    out.push(b'\n');
                }
            }
        }
    }
    Ok(out)
}

pub fn cmd_simulate(a: &SimulateArgs, exec: Execution) -> Result<String> {
    let cfg = RunConfig::load(&a.run.config, a.run.seed)?.fed;
    // Fail on an infeasible budget before any training.
    cfg.sigma()?;
    let p = match &a.codec_dir {
        Some(dir) => load_codec(cfg, dir)?,
        None => pretrain_inline(cfg, exec)?.0,
    };
    let out = &a.run.out_dir;
    if a.log_gradients {
        io::write(&out.join(GRADIENT_LOG_FILE), &gradient_log(&p.cfg, &p.task, exec)?)?;
    }
    let system = FedSystem::new(&p.cfg, p.task, p.codec)?;
    let mut rec = system.run(exec)?;
    rec.pretrain_scalars = p.summary.uploaded_scalars;
    rec.codec_loss = p.summary.codec_loss.as_ref().map(|l| (l.initial, l.r#final));

    let summary = RunSummary::new(&p.cfg, &p.hash, &rec);
    io::write(&out.join(ROUNDS_FILE), &rounds_csv(&rec)?)?;
    io::write_json(&out.join(SUMMARY_FILE), &summary)?;
    io::write_json(
        &out.join(MODEL_FILE),
        &ModelCheckpoint {
            format: "privlora-model",
            version: 1,
            config_hash: &p.hash,
            model: &rec.final_model,
        },
    )?;
    write_meta(out, "simulate")?;
    if rec.status == RunStatus::Diverged {
        return Err(CliError::Diverged {
            round: rec.rounds.last().map_or(0, |r| r.round),
        });
    }
    Ok(format!(
        "{} rounds ({:?}), sigma {}, accuracy {} -> {}, epsilon {}\n",
        summary.rounds_run, summary.status, summary.sigma, summary.initial_accuracy, summary.final_accuracy, summary.final_gdp_epsilon
    ))
}

#[derive(Serialize)]
struct ModelCheckpoint<'a> {
    format: &'a str,
    version: u32,
    config_hash: &'a str,
    model: &'a privlora_core::fed::ToyModel,
}

pub fn cmd_report(a: &ReportArgs) -> Result<String> {
    let mut runs = Vec::with_capacity(a.runs.len());
    for path in &a.runs {
        let file = if path.is_dir() { path.join(SUMMARY_FILE) } else { path.clone() };
        runs.push(privlora_core::json::from_slice::<RunSummary>(&io::read(&file)?)?);
    }
    let (rows, curves) = build_report(&runs)?;
    let table = io::csv_bytes(&rows)?;
    io::write(&a.out_dir.join("report.csv"), &table)?;
    io::write(&a.out_dir.join("report_curves.csv"), &io::csv_bytes(&curves)?)?;
    write_meta(&a.out_dir, "report")?;
    Ok(String::from_utf8_lossy(&table).into_owned())
}

pub fn cmd_payload(a: &PayloadArgs) -> Result<String> {
    let model = PayloadModel {
        n: a.n,
        r: a.r,
        parts: 2,
        modules: a.modules,
        layers: a.layers,
        epochs: a.epochs,
        bytes_per_scalar: a.bytes_per_scalar,
    };
    let csv = model.compute()?.to_csv()?;
    if let Some(path) = &a.out {
        io::write(path, &csv)?;
    }
    Ok(String::from_utf8_lossy(&csv).into_owned())
}

pub fn cmd_histograms(a: &HistogramArgs) -> Result<String> {
    let entries = parse_log(&io::read(&a.log)?)?;
    let binning = match a.range {
        Some(r) => Binning::new(a.bins, r)?,
        None => Binning::fit(a.bins, entries.iter().flat_map(|e| e.values.iter().copied()))?,
    };
    let rows = histograms(&entries, binning);
    io::write(&a.out, &io::csv_bytes(&rows)?)?;
    Ok(format!(
        "{} histogram rows, {} bins over [-{r}, {r}]\n",
        rows.len(),
        binning.bins,
        r = binning.range
    ))
}
