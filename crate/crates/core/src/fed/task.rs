//! Synthetic classification task with a residual tanh network.
//!
//! The network has `layers × modules` adapted square weights applied in
//! sequence, `h ← h + tanh((W + A·B) h)`, followed by a frozen linear head.
//! Labels come from a teacher whose weights differ from the base by a
//! low-rank shift, so LoRA tuning of the base can recover the gap.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    /// Width of the residual stream; adapted weights are `n × n`.
    pub n: usize,
    pub layers: usize,
    pub modules: usize,
    pub classes: usize,
    pub clients: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Base weights have entries `N(0, base_scale²/n)`.
    pub base_scale: f64,
    /// Rank of the teacher shift.
    pub shift_rank: usize,
    /// The teacher shift `U·V` has entries of order `shift_scale/√n`.
    pub shift_scale: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n: 64,
            layers: 4,
            modules: 4,
            classes: 4,
            clients: 20,
            train_size: 1000,
            eval_size: 500,
            base_scale: 0.5,
            shift_rank: 8,
            shift_scale: 1.0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::param("the toy task needs at least two classes"));
        }
        if self.n == 0 || self.layers == 0 || self.modules == 0 || self.shift_rank == 0 {
            return Err(Error::param("toy dimensions must be positive"));
        }
        if self.clients == 0 || self.train_size < self.clients || self.eval_size == 0 {
            return Err(Error::param("every client needs at least one training sample"));
        }
        if !(self.base_scale >= 0.0) || !(self.shift_scale >= 0.0) {
            return Err(Error::param("scales must be non-negative"));
        }
        Ok(())
    }

    pub fn slots(&self) -> usize {
        self.layers * self.modules
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row.
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let cols = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Dataset {
            x: Matrix::new(idx.len(), cols, data).expect("rows copied from a valid matrix"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// Trainable low-rank adapter for one weight: `ΔW = A·B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub a: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub layers: usize,
    pub modules: usize,
    /// Adapted weights in slot order `layer · modules + module`.
    pub weights: Vec<Matrix>,
    pub head: Matrix,
}

/// Loss and gradients for a batch under the mean-loss convention.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    /// `(∂L/∂A, ∂L/∂B)` per slot, when adapters were given.
    pub adapters: Vec<(Matrix, Matrix)>,
    /// `∂L/∂W` per slot, when requested.
    pub weights: Vec<Matrix>,
}

fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `wᵀ g`, accumulated into `out`.
fn matvec_t_add(w: &Matrix, g: &[f64], out: &mut [f64]) {
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += gi * wij;
        }
    }
}

/// `m += u vᵀ`
fn outer_add(m: &mut Matrix, u: &[f64], v: &[f64]) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        for (d, &vj) in data[i * cols..(i + 1) * cols].iter_mut().zip(v) {
            *d += ui * vj;
        }
    }
}

impl ToyModel {
    pub fn width(&self) -> usize {
        self.head.cols()
    }

    pub fn classes(&self) -> usize {
        self.head.rows()
    }

    pub fn slots(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite) && self.head.is_finite()
    }

    fn check_adapters(&self, adapters: Option<&[Adapter]>) -> Result<()> {
        if let Some(ad) = adapters {
            if ad.len() != self.slots() {
                return Err(Error::dim(format!("{} adapters for {} slots", ad.len(), self.slots())));
            }
            let n = self.width();
            for a in ad {
                let r = a.a.cols();
                if a.a.shape() != (n, r) || a.b.shape() != (r, n) {
                    return Err(Error::dim("adapter shapes do not match the model"));
                }
            }
        }
        Ok(())
    }

    /// Residual stream states `h_0..h_S` and block outputs `tanh(u_k)`.
    fn trace(&self, x: &[f64], adapters: Option<&[Adapter]>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut hs = vec![x.to_vec()];
        let mut ts = Vec::with_capacity(self.slots());
        let mut bhs = Vec::with_capacity(self.slots());
        for (k, w) in self.weights.iter().enumerate() {
            let h = hs.last().expect("non-empty");
            let mut u = matvec(w, h);
            if let Some(ad) = adapters {
                let bh = matvec(&ad[k].b, h);
                for (ui, v) in u.iter_mut().zip(matvec(&ad[k].a, &bh)) {
                    *ui += v;
                }
                bhs.push(bh);
            }
            let t: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
            let next: Vec<f64> = h.iter().zip(&t).map(|(a, b)| a + b).collect();
            ts.push(t);
            hs.push(next);
        }
        (hs, ts, bhs)
    }

    pub fn logits(&self, x: &[f64], adapters: Option<&[Adapter]>) -> Result<Vec<f64>> {
        if x.len() != self.width() {
            return Err(Error::dim("input width does not match the model"));
        }
        self.check_adapters(adapters)?;
        let (hs, _, _) = self.trace(x, adapters);
        Ok(matvec(&self.head, hs.last().expect("non-empty")))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x, None)?))
    }

    /// Accuracy and mean cross-entropy on a dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let mut correct = 0usize;
        let mut loss = 0.0;
        for i in 0..data.len() {
            let z = self.logits(data.x.row(i), None)?;
            if argmax(&z) == data.y[i] {
                correct += 1;
            }
            loss += cross_entropy(&z, data.y[i]).0;
        }
        let n = data.len().max(1) as f64;
        Ok((correct as f64 / n, loss / n))
    }

    /// Mean cross-entropy over `idx` with gradients for the adapters and,
    /// if `dense` is set, for the adapted weights themselves.
    pub fn loss_and_grad(&self, data: &Dataset, idx: &[usize], adapters: Option<&[Adapter]>, dense: bool) -> Result<BatchGrad> {
        if idx.is_empty() {
            return Err(Error::param("empty batch"));
        }
        if data.x.cols() != self.width() {
            return Err(Error::dim("data width does not match the model"));
        }
        self.check_adapters(adapters)?;
        let n = self.width();
        let mut ga: Vec<(Matrix, Matrix)> = adapters
            .map(|ad| {
                ad.iter()
                    .map(|a| (Matrix::zeros(a.a.rows(), a.a.cols()), Matrix::zeros(a.b.rows(), a.b.cols())))
                    .collect()
            })
            .unwrap_or_default();
        let mut gw: Vec<Matrix> = if dense {
            vec![Matrix::zeros(n, n); self.slots()]
        } else {
            Vec::new()
        };
        let scale = 1.0 / idx.len() as f64;
        let mut loss = 0.0;
        for &i in idx {
            let (hs, ts, bhs) = self.trace(data.x.row(i), adapters);
            let z = matvec(&self.head, hs.last().expect("non-empty"));
            let (l, mut dz) = cross_entropy(&z, data.y[i]);
            loss += l * scale;
            dz.iter_mut().for_each(|v| *v *= scale);
            let mut gh = vec![0.0; n];
            matvec_t_add(&self.head, &dz, &mut gh);
            for k in (0..self.slots()).rev() {
                let gu: Vec<f64> = gh.iter().zip(&ts[k]).map(|(g, t)| g * (1.0 - t * t)).collect();
                let h = &hs[k];
                if dense {
                    outer_add(&mut gw[k], &gu, h);
                }
                // Residual path plus Wᵀ gu.
                matvec_t_add(&self.weights[k], &gu, &mut gh);
                if let Some(ad) = adapters {
                    let (da, db) = &mut ga[k];
                    outer_add(da, &gu, &bhs[k]);
                    let mut atg = vec![0.0; ad[k].a.cols()];
                    matvec_t_add(&ad[k].a, &gu, &mut atg);
                    outer_add(db, &atg, h);
                    matvec_t_add(&ad[k].b, &atg, &mut gh);
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        Ok(BatchGrad {
            loss,
            adapters: ga,
            weights: gw,
        })
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Loss `logsumexp(z) − z_y` and its gradient `softmax(z) − e_y`.
fn cross_entropy(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = m + sum.ln() - z[y];
    let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    g[y] -= 1.0;
    (loss, g)
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub spec: ToySpec,
    pub base: ToyModel,
    pub teacher: ToyModel,
    pub train: Dataset,
    /// Disjoint, covering partition of `train` row indices.
    pub shards: Vec<Vec<usize>>,
    pub eval: Dataset,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Matrix {
    let d = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| d.sample(rng))
}

fn inputs(count: usize, n: usize, rng: &mut impl rand::Rng) -> Matrix {
    Matrix::from_fn(count, n, |_, _| StandardNormal.sample(rng))
}

fn label(teacher: &ToyModel, x: Matrix) -> Result<Dataset> {
    let y = (0..x.rows())
        .map(|i| teacher.predict(x.row(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { x, y })
}

pub fn make_toy_task(spec: &ToySpec, seed: u64) -> Result<ToyTask> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = rng::stream(seed, Purpose::Task, &[0]);
    let weights: Vec<Matrix> = (0..spec.slots())
        .map(|_| gaussian_matrix(n, n, spec.base_scale / (n as f64).sqrt(), &mut rng))
        .collect();
    let head = gaussian_matrix(spec.classes, n, 1.0 / (n as f64).sqrt(), &mut rng);
    let base = ToyModel {
        layers: spec.layers,
        modules: spec.modules,
        weights,
        head,
    };
    let mut teacher = base.clone();
    // U V with U, V entries N(0, 1/√(n·k)) has entries of order 1/√n.
    let k = spec.shift_rank;
    let f = (spec.shift_scale / (n as f64 * k as f64).sqrt()).sqrt();
    for w in &mut teacher.weights {
        let u = gaussian_matrix(n, k, f, &mut rng);
        let v = gaussian_matrix(k, n, f, &mut rng);
        w.add_scaled(&u.matmul(&v)?, 1.0)?;
    }
    let train = label(&teacher, inputs(spec.train_size, n, &mut rng))?;
    let eval = label(&teacher, inputs(spec.eval_size, n, &mut rng))?;

    let mut order: Vec<usize> = (0..spec.train_size).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Task, &[1]));
    let mut shards = vec![Vec::new(); spec.clients];
    for (j, i) in order.into_iter().enumerate() {
        shards[j % spec.clients].push(i);
    }
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(ToyTask {
        spec: *spec,
        base,
        teacher,
        train,
        shards,
        eval,
    })
}
