//! Plain FedAvg-LoRA reference loop, written against the toy model's loss
//! gradient only. Shares the adapter init and shuffle streams with the
//! simulator so that the two can be compared round by round.

use privlora_core::fed::{init_adapters, FedConfig, ToyTask};
use privlora_core::rng::{self, Purpose};
use privlora_core::Matrix;
use rand::seq::SliceRandom;

fn product(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let (n, r) = a.shape();
    let m = b.cols();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for k in 0..r {
            let x = a.as_slice()[i * r + k];
            for j in 0..m {
                out[i * m + j] += x * b.as_slice()[k * m + j];
            }
        }
    }
    out
}

/// Server weights after each of `rounds` rounds with full participation.
pub fn fedavg_trajectory(cfg: &FedConfig, task: &ToyTask, rounds: usize) -> Vec<Vec<Matrix>> {
    let mut model = task.base.clone();
    let mut trajectory = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let mut sums: Vec<Vec<f64>> = model.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let clients = task.shards.len();
        for (id, shard) in task.shards.iter().enumerate() {
            let mut ad = init_adapters(&model, cfg.local.rank, cfg.seed, id, round as u64);
            for epoch in 0..cfg.local.epochs {
                let mut order = shard.clone();
                order.shuffle(&mut rng::stream(cfg.seed, Purpose::LocalShuffle, &[id as u64, round as u64, epoch as u64]));
                for batch in order.chunks(cfg.local.batch) {
                    let g = model.loss_and_grad(&task.train, batch, Some(&ad), false).unwrap();
                    for (a, (ga, gb)) in ad.iter_mut().zip(&g.adapters) {
                        for (x, d) in a.a.as_mut_slice().iter_mut().zip(ga.as_slice()) {
                            *x -= cfg.local.lr * d;
                        }
                        for (x, d) in a.b.as_mut_slice().iter_mut().zip(gb.as_slice()) {
                            *x -= cfg.local.lr * d;
                        }
                    }
                }
            }
            for (s, a) in sums.iter_mut().zip(&ad) {
                for (x, v) in s.iter_mut().zip(product(&a.a, &a.b)) {
                    *x += v;
                }
            }
        }
        let eta = cfg.server_lr * cfg.server_lr_decay.powi(round as i32);
        for (w, s) in model.weights.iter_mut().zip(&sums) {
            for (x, v) in w.as_mut_slice().iter_mut().zip(s) {
                *x += eta * v / clients as f64;
            }
        }
        trajectory.push(model.weights.clone());
    }
    trajectory
}
