//! Synthetic gradients drawn from transmitted per-cell statistics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lora::{LoraGrad, Part};
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};
use crate::stats::{CellKey, GridShape, StatCell, StatsBundle};

/// Synthetic factor pairs, `count` per `(module, layer, epoch)` slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub items: Vec<LoraGrad>,
    /// The `(A, B)` cells behind each slot, in the order items were drawn.
    pub source_keys: Vec<CellKey>,
    pub seed: u64,
}

fn normal(cell: StatCell) -> Result<Normal<f64>> {
    if !(cell.std >= 0.0) || !cell.mean.is_finite() || !cell.std.is_finite() {
        return Err(Error::param(format!(
            "cannot sample from mean {} std {}",
            cell.mean, cell.std
        )));
    }
    Normal::new(cell.mean, cell.std).map_err(|e| Error::param(e.to_string()))
}

/// Draws `A: n × r` and `B: r × n` with i.i.d. entries from the two cells.
pub fn sample_pair(a_cell: StatCell, b_cell: StatCell, n: usize, r: usize, rng: &mut impl Rng) -> Result<(Matrix, Matrix)> {
    let na = normal(a_cell)?;
    let nb = normal(b_cell)?;
    let a = Matrix::from_fn(n, r, |_, _| na.sample(rng));
    let b = Matrix::from_fn(r, n, |_, _| nb.sample(rng));
    Ok((a, b))
}

fn slots(shape: GridShape) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..shape.epochs)
        .flat_map(move |e| (0..shape.layers).flat_map(move |l| (0..shape.modules).map(move |m| (e, l, m))))
}

fn slot_cells(stats: &StatsBundle, (epoch, layer, module): (usize, usize, usize)) -> (CellKey, CellKey, StatCell, StatCell) {
    let ka = CellKey {
        part: Part::A,
        module,
        layer,
        epoch,
    };
    let kb = CellKey { part: Part::B, ..ka };
    let ca = stats.cell(ka).expect("slot inside grid");
    let cb = stats.cell(kb).expect("slot inside grid");
    (ka, kb, ca, cb)
}

/// `count` synthetic pairs per slot of a complete bundle. Each item has its
/// own derived stream, so the batch is the same under any execution mode.
pub fn sample_synthetic(stats: &StatsBundle, n: usize, r: usize, count: usize, seed: u64, exec: Execution) -> Result<SyntheticBatch> {
    if n == 0 || r == 0 {
        return Err(Error::param("synthetic factors need n, r >= 1"));
    }
    if !stats.is_complete() {
        return Err(Error::IncompleteGrid(format!(
            "statistics cover {} of {} epochs",
            stats.epochs_covered(),
            stats.shape().epochs
        )));
    }
    let slots: Vec<_> = slots(stats.shape()).collect();
    let mut source_keys = Vec::with_capacity(2 * slots.len());
    for &s in &slots {
        let (ka, kb, ..) = slot_cells(stats, s);
        source_keys.push(ka);
        source_keys.push(kb);
    }
    let jobs: Vec<(usize, usize)> = (0..slots.len())
        .flat_map(|s| (0..count).map(move |j| (s, j)))
        .collect();
    let items = exec
        .map(&jobs, |&(s, j)| {
            let (epoch, layer, module) = slots[s];
            let (_, _, ca, cb) = slot_cells(stats, slots[s]);
            let mut rng = rng::stream(seed, Purpose::Synthetic, &[s as u64, j as u64]);
            let (a, b) = sample_pair(ca, cb, n, r, &mut rng)?;
            Ok(LoraGrad {
                a,
                b,
                layer,
                module,
                epoch,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticBatch {
        items,
        source_keys,
        seed,
    })
}

/// Training stream for the codec: a uniform mixture over every slot of
/// every received bundle.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pairs: Vec<(StatCell, StatCell)>,
    n: usize,
    r: usize,
}

impl SyntheticSource {
    pub fn new(bundles: &[StatsBundle], n: usize, r: usize) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::param("no statistics to sample from"));
        }
        let mut pairs = Vec::new();
        for b in bundles {
            if !b.is_complete() {
                return Err(Error::IncompleteGrid(format!(
                    "statistics from client {:?} are incomplete",
                    b.client
                )));
            }
            for s in slots(b.shape()) {
                let (_, _, ca, cb) = slot_cells(b, s);
                normal(ca)?;
                normal(cb)?;
                pairs.push((ca, cb));
            }
        }
        Ok(Self { pairs, n, r })
    }

    pub fn slot_count(&self) -> usize {
        self.pairs.len()
    }

    /// One sample from the stream identified by `coords`.
    pub fn draw(&self, seed: u64, coords: &[u64]) -> (Matrix, Matrix) {
        let mut rng = rng::stream(seed, Purpose::Synthetic, coords);
        let (ca, cb) = self.pairs[rng.random_range(0..self.pairs.len())];
        sample_pair(ca, cb, self.n, self.r, &mut rng).expect("cells validated at construction")
    }
}
