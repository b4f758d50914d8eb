//! Client-side work: selection, local LoRA training, transmitted factors.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::task::{Adapter, Dataset, ToyModel};
use crate::error::{Error, Result};
use crate::lora::LoraGrad;
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub rank: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 0.5,
            batch: 10,
            rank: 8,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.rank == 0 {
            return Err(Error::param("local epochs, batch and rank must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::param("local learning rate must be positive"));
        }
        Ok(())
    }
}

/// Poisson sampling: each of `m` clients joins independently with
/// probability `p`. Ids are returned in ascending order.
pub fn sample_clients(m: usize, p: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param(format!("selection probability must be in (0, 1], got {p}")));
    }
    if p == 1.0 {
        return Ok((0..m).collect());
    }
    Ok((0..m).filter(|_| rng.random::<f64>() < p).collect())
}

/// One client's view: a shard of the training data.
#[derive(Debug, Clone, Copy)]
pub struct ClientState<'a> {
    pub id: usize,
    pub data: &'a Dataset,
    pub shard: &'a [usize],
}

/// LoRA-factor gradients of the mean local loss on `batch` (frozen base).
pub fn local_step(model: &ToyModel, adapters: &[Adapter], state: &ClientState<'_>, batch: &[usize]) -> Result<(f64, Vec<LoraGrad>)> {
    if state.shard.is_empty() {
        return Err(Error::param(format!("client {} has an empty shard", state.id)));
    }
    let g = model.loss_and_grad(state.data, batch, Some(adapters), false)?;
    let grads = g
        .adapters
        .into_iter()
        .enumerate()
        .map(|(slot, (a, b))| LoraGrad {
            a,
            b,
            layer: slot / model.modules,
            module: slot % model.modules,
            epoch: 0,
        })
        .collect();
    Ok((g.loss, grads))
}

/// Fresh adapters: `B` Gaussian with entries `N(0, 1/(n·r))` so that
/// `‖B‖_F ≈ 1`, `A` zero, hence `A·B = 0` at the start.
pub fn init_adapters(model: &ToyModel, rank: usize, seed: u64, client: usize, round: u64) -> Vec<Adapter> {
    let n = model.width();
    let mut rng = rng::stream(seed, Purpose::LoraInit, &[client as u64, round]);
    let d = Normal::new(0.0, 1.0 / ((n * rank) as f64).sqrt()).expect("finite std");
    (0..model.slots())
        .map(|_| Adapter {
            a: Matrix::zeros(n, rank),
            b: Matrix::from_fn(rank, n, |_, _| d.sample(&mut rng)),
        })
        .collect()
}

/// The factor pair a client transmits for the dense update `−A·B`: the
/// server applies `W − η·(−A)·B`, so `η = 1` adds the learned `A·B`.
pub fn transmitted(model: &ToyModel, adapters: &[Adapter], epoch: usize) -> Vec<LoraGrad> {
    adapters
        .iter()
        .enumerate()
        .map(|(slot, ad)| LoraGrad {
            a: ad.a.scale(-1.0),
            b: ad.b.clone(),
            layer: slot / model.modules,
            module: slot % model.modules,
            epoch,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    /// Factors to transmit, one per adapted weight.
    pub update: Vec<LoraGrad>,
    /// Mean loss over the last local epoch.
    pub loss: f64,
    /// Transmitted-form factors after every epoch, when requested.
    pub snapshots: Vec<Vec<LoraGrad>>,
}

/// Trains fresh adapters on the client's shard for `cfg.epochs` epochs of
/// shuffled minibatch SGD.
pub fn local_train(model: &ToyModel, state: &ClientState<'_>, cfg: &LocalConfig, seed: u64, round: u64, record: bool) -> Result<LocalOutcome> {
    cfg.validate()?;
    if state.shard.is_empty() {
        return Err(Error::param(format!("client {} has an empty shard", state.id)));
    }
    let mut adapters = init_adapters(model, cfg.rank, seed, state.id, round);
    let mut snapshots = Vec::new();
    let mut last_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let mut order = state.shard.to_vec();
        order.shuffle(&mut rng::stream(seed, Purpose::LocalShuffle, &[state.id as u64, round, epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let (loss, grads) = local_step(model, &adapters, state, batch)?;
            total += loss * batch.len() as f64;
            for (ad, g) in adapters.iter_mut().zip(&grads) {
                ad.a.add_scaled(&g.a, -cfg.lr)?;
                ad.b.add_scaled(&g.b, -cfg.lr)?;
            }
        }
        last_loss = total / order.len() as f64;
        if !last_loss.is_finite() || adapters.iter().any(|a| !a.a.is_finite() || !a.b.is_finite()) {
            return Err(Error::NonFinite("local training"));
        }
        if record {
            snapshots.push(transmitted(model, &adapters, epoch));
        }
    }
    Ok(LocalOutcome {
        update: transmitted(model, &adapters, 0),
        loss: last_loss,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::task::{make_toy_task, ToySpec};

    fn spec() -> ToySpec {
        ToySpec {
            n: 8,
            layers: 1,
            modules: 2,
            classes: 3,
            clients: 2,
            train_size: 12,
            eval_size: 4,
            base_scale: 0.5,
            shift_rank: 2,
            shift_scale: 1.0,
        }
    }

    #[test]
    fn full_participation_and_determinism() {
        let mut rng = rng::stream(0, Purpose::Selection, &[]);
        assert_eq!(sample_clients(5, 1.0, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        let a = sample_clients(50, 0.3, &mut rng::stream(1, Purpose::Selection, &[])).unwrap();
        let b = sample_clients(50, 0.3, &mut rng::stream(1, Purpose::Selection, &[])).unwrap();
        assert_eq!(a, b);
        assert!(sample_clients(5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn duplicated_batch_gives_identical_gradients() {
        let task = make_toy_task(&spec(), 2).unwrap();
        let mut ad = init_adapters(&task.base, 2, 0, 0, 0);
        ad[0].a.set(1, 1, 0.3);
        let state = ClientState {
            id: 0,
            data: &task.train,
            shard: &task.shards[0],
        };
        let (l1, g1) = local_step(&task.base, &ad, &state, &[3]).unwrap();
        let (l2, g2) = local_step(&task.base, &ad, &state, &[3, 3]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (x, y) in g1.iter().zip(&g2) {
            assert!(x.a.max_abs_diff(&y.a) < 1e-15 && x.b.max_abs_diff(&y.b) < 1e-15);
        }
    }

    #[test]
    fn perfectly_fit_data_gives_near_zero_gradients() {
        // A head scaled up makes the base confident on its own labels.
        let task = make_toy_task(&spec(), 3).unwrap();
        let mut base = task.base.clone();
        base.head = base.head.scale(1e3);
        let x = task.train.x.clone();
        let y = (0..x.rows()).map(|i| base.predict(x.row(i)).unwrap()).collect();
        let data = Dataset { x, y };
        let shard: Vec<usize> = (0..data.len()).collect();
        let state = ClientState {
            id: 0,
            data: &data,
            shard: &shard,
        };
        let ad = init_adapters(&base, 2, 0, 0, 0);
        let (loss, g) = local_step(&base, &ad, &state, &shard).unwrap();
        assert!(loss < 1e-6, "{loss}");
        for gr in g {
            assert!(gr.a.as_slice().iter().all(|v| v.abs() < 1e-3));
        }
    }

    #[test]
    fn local_training_reduces_loss_and_records_each_epoch() {
        let task = make_toy_task(&spec(), 4).unwrap();
        let state = ClientState {
            id: 1,
            data: &task.train,
            shard: &task.shards[1],
        };
        let cfg = LocalConfig {
            epochs: 3,
            lr: 0.5,
            batch: 2,
            rank: 2,
        };
        let out = local_train(&task.base, &state, &cfg, 0, 0, true).unwrap();
        assert_eq!(out.snapshots.len(), 3);
        assert_eq!(out.snapshots[2][1].epoch, 2);
        let before = task.base.loss_and_grad(&task.train, state.shard, None, false).unwrap().loss;
        assert!(out.loss < before);
        let again = local_train(&task.base, &state, &cfg, 0, 0, true).unwrap();
        assert_eq!(out.update, again.update);
    }
}
