//! Streaming per-cell gradient statistics collected on the client.
//!
//! A cell is one `(part, module, layer, epoch)` coordinate. Each epoch every
//! cell receives exactly one update from the matching low-rank factor:
//!
//! ```text
//! m' = β1·m + (1-β1)·mean(x)
//! v  = clamp(mean((x - m')²), h1, h2)
//! s' = √(β2·s² + (1-β2)·v)
//! ```
//!
//! The recursion state of epoch `e` starts from the cell of epoch `e-1`
//! (zero for the first epoch). Only the scalar `(mean, std)` pairs ever
//! leave the client.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::{self, sig17};
use crate::lora::{LoraGrad, Part};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorHyper {
    #[serde(with = "sig17")]
    pub beta1: f64,
    #[serde(with = "sig17")]
    pub beta2: f64,
    #[serde(with = "sig17")]
    pub h1: f64,
    #[serde(with = "sig17")]
    pub h2: f64,
}

impl Default for EstimatorHyper {
    fn default() -> Self {
        Self {
            beta1: 0.99,
            beta2: 0.9,
            h1: 1e-5,
            h2: 1e-3,
        }
    }
}

impl EstimatorHyper {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::param("beta1 and beta2 must lie in (0, 1)"));
        }
        if !(self.h1 > 0.0 && self.h2 >= self.h1 && self.h2.is_finite()) {
            return Err(Error::param("need 0 < h1 <= h2"));
        }
        Ok(())
    }
}

fn entry_mean(grad: &Matrix) -> Result<f64> {
    if grad.is_empty() {
        return Err(Error::param("empty gradient matrix"));
    }
    Ok(grad.as_slice().iter().sum::<f64>() / grad.len() as f64)
}

/// `β1·m + (1-β1)·mean(grad)`
pub fn update_mean(m: f64, grad: &Matrix, beta1: f64) -> Result<f64> {
    if !(beta1 > 0.0 && beta1 < 1.0) {
        return Err(Error::param("beta1 must lie in (0, 1)"));
    }
    Ok(beta1 * m + (1.0 - beta1) * entry_mean(grad)?)
}

/// Mean squared deviation from `m_new`, clamped to `[h1, h2]`.
pub fn update_variance(grad: &Matrix, m_new: f64, h1: f64, h2: f64) -> Result<f64> {
    if !(h1 > 0.0 && h2 >= h1) {
        return Err(Error::param("need 0 < h1 <= h2"));
    }
    if grad.is_empty() {
        return Err(Error::param("empty gradient matrix"));
    }
    let msd = grad
        .as_slice()
        .iter()
        .map(|x| (x - m_new).powi(2))
        .sum::<f64>()
        / grad.len() as f64;
    Ok(msd.clamp(h1, h2))
}

/// `√(β2·s² + (1-β2)·v)`
pub fn update_std(s: f64, v: f64, beta2: f64) -> f64 {
    (beta2 * s * s + (1.0 - beta2) * v).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub part: Part,
    pub module: usize,
    pub layer: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StatCell {
    pub mean: f64,
    pub std: f64,
}

/// Declared grid of a bundle. The part axis always has two entries (A, B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub layers: usize,
    pub modules: usize,
    pub parts: usize,
    pub epochs: usize,
}

impl GridShape {
    pub fn new(layers: usize, modules: usize, epochs: usize) -> Self {
        Self {
            layers,
            modules,
            parts: 2,
            epochs,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.layers * self.modules * self.parts * self.epochs
    }

    /// Transmitted scalars: one mean and one std per cell.
    pub fn scalar_count(&self) -> usize {
        2 * self.cell_count()
    }

    fn index(&self, key: &CellKey) -> Option<usize> {
        if key.layer >= self.layers || key.module >= self.modules || key.epoch >= self.epochs {
            return None;
        }
        let part = match key.part {
            Part::A => 0,
            Part::B => 1,
        };
        Some(((key.epoch * self.layers + key.layer) * self.modules + key.module) * 2 + part)
    }

    fn key(&self, index: usize) -> CellKey {
        let part = if index % 2 == 0 { Part::A } else { Part::B };
        let rest = index / 2;
        let module = rest % self.modules;
        let rest = rest / self.modules;
        CellKey {
            part,
            module,
            layer: rest % self.layers,
            epoch: rest / self.layers,
        }
    }
}

/// The complete set of statistics a client sends to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsBundle {
    pub hyper: EstimatorHyper,
    shape: GridShape,
    cells: Vec<StatCell>,
    pub client: Option<usize>,
    epochs_covered: usize,
}

impl StatsBundle {
    /// Fresh bundle with every cell at `m = 0, s = 0`.
    pub fn new(hyper: EstimatorHyper, shape: GridShape) -> Result<Self> {
        hyper.validate()?;
        if shape.parts != 2 {
            return Err(Error::param("statistics grids always have two parts"));
        }
        Ok(Self {
            hyper,
            shape,
            cells: vec![StatCell::default(); shape.cell_count()],
            client: None,
            epochs_covered: 0,
        })
    }

    /// Complete bundle with every cell supplied directly, e.g. for
    /// hand-built priors. Negative or non-finite statistics are rejected.
    pub fn from_fn(hyper: EstimatorHyper, shape: GridShape, mut f: impl FnMut(CellKey) -> StatCell) -> Result<Self> {
        let mut b = Self::new(hyper, shape)?;
        for i in 0..b.cells.len() {
            let key = shape.key(i);
            let c = f(key);
            if !c.mean.is_finite() || !c.std.is_finite() || c.std < 0.0 {
                return Err(Error::param(format!("invalid statistics in cell {key:?}")));
            }
            b.cells[i] = c;
        }
        b.epochs_covered = shape.epochs;
        Ok(b)
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn epochs_covered(&self) -> usize {
        self.epochs_covered
    }

    pub fn is_complete(&self) -> bool {
        self.epochs_covered == self.shape.epochs
    }

    pub fn cell(&self, key: CellKey) -> Option<StatCell> {
        self.shape.index(&key).map(|i| self.cells[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (CellKey, StatCell)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, c)| (self.shape.key(i), *c))
    }

    pub fn scalar_count(&self) -> usize {
        self.shape.scalar_count()
    }

    /// Applies one epoch of observations. The gradients must cover every
    /// `(module, layer)` slot of the next uncovered epoch exactly once; the
    /// bundle is left untouched on error.
    pub fn ingest_epoch(&mut self, grads: &[LoraGrad]) -> Result<()> {
        let epoch = self.epochs_covered;
        if epoch >= self.shape.epochs {
            return Err(Error::IncompleteGrid(format!(
                "all {} declared epochs are already covered",
                self.shape.epochs
            )));
        }
        let slots = self.shape.layers * self.shape.modules;
        let mut slot_grad: Vec<Option<&LoraGrad>> = vec![None; slots];
        for g in grads {
            g.validate()?;
            if g.epoch != epoch {
                return Err(Error::IncompleteGrid(format!(
                    "gradient for epoch {} while ingesting epoch {epoch}",
                    g.epoch
                )));
            }
            if g.layer >= self.shape.layers || g.module >= self.shape.modules {
                return Err(Error::IncompleteGrid(format!(
                    "layer {} / module {} outside the declared grid",
                    g.layer, g.module
                )));
            }
            let slot = &mut slot_grad[g.layer * self.shape.modules + g.module];
            if slot.is_some() {
                return Err(Error::IncompleteGrid(format!(
                    "duplicate gradient for layer {} module {}",
                    g.layer, g.module
                )));
            }
            *slot = Some(g);
        }
        if let Some(missing) = slot_grad.iter().position(Option::is_none) {
            return Err(Error::IncompleteGrid(format!(
                "missing gradient for layer {} module {} in epoch {epoch}",
                missing / self.shape.modules,
                missing % self.shape.modules
            )));
        }

        let h = self.hyper;
        let mut updated = Vec::with_capacity(slots * 2);
        for g in slot_grad.into_iter().flatten() {
            for part in Part::BOTH {
                let key = CellKey {
                    part,
                    module: g.module,
                    layer: g.layer,
                    epoch,
                };
                let prev = if epoch == 0 {
                    StatCell::default()
                } else {
                    self.cell(CellKey {
                        epoch: epoch - 1,
                        ..key
                    })
                    .expect("previous epoch is inside the grid")
                };
                let x = g.part(part);
                let mean = update_mean(prev.mean, x, h.beta1)?;
                let v = update_variance(x, mean, h.h1, h.h2)?;
                let std = update_std(prev.std, v, h.beta2);
                updated.push((key, StatCell { mean, std }));
            }
        }
        for (key, cell) in updated {
            let i = self.shape.index(&key).expect("key inside grid");
            self.cells[i] = cell;
        }
        self.epochs_covered += 1;
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        json::to_vec_pretty(&StatsDocument::from(self))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        json::from_slice::<StatsDocument>(bytes)?.into_bundle()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Provenance {
    client: Option<usize>,
    epochs_covered: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRecord {
    part: Part,
    module: usize,
    layer: usize,
    epoch: usize,
    #[serde(with = "sig17")]
    mean: f64,
    #[serde(with = "sig17")]
    std: f64,
}

/// On-disk layout of a stats file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsDocument {
    hyper: EstimatorHyper,
    shape: GridShape,
    provenance: Provenance,
    cells: Vec<CellRecord>,
}

impl From<&StatsBundle> for StatsDocument {
    fn from(b: &StatsBundle) -> Self {
        Self {
            hyper: b.hyper,
            shape: b.shape,
            provenance: Provenance {
                client: b.client,
                epochs_covered: b.epochs_covered,
            },
            cells: b
                .iter()
                .map(|(k, c)| CellRecord {
                    part: k.part,
                    module: k.module,
                    layer: k.layer,
                    epoch: k.epoch,
                    mean: c.mean,
                    std: c.std,
                })
                .collect(),
        }
    }
}

impl StatsDocument {
    fn into_bundle(self) -> Result<StatsBundle> {
        let mut b = StatsBundle::new(self.hyper, self.shape)?;
        if self.provenance.epochs_covered > self.shape.epochs {
            return Err(Error::IncompleteGrid("epochs_covered exceeds grid".into()));
        }
        b.client = self.provenance.client;
        b.epochs_covered = self.provenance.epochs_covered;
        if self.cells.len() != b.cells.len() {
            return Err(Error::IncompleteGrid(format!(
                "expected {} cells, found {}",
                b.cells.len(),
                self.cells.len()
            )));
        }
        let mut seen = vec![false; b.cells.len()];
        for c in self.cells {
            let key = CellKey {
                part: c.part,
                module: c.module,
                layer: c.layer,
                epoch: c.epoch,
            };
            let i = b
                .shape
                .index(&key)
                .ok_or_else(|| Error::IncompleteGrid(format!("cell {key:?} outside grid")))?;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::IncompleteGrid(format!("duplicate cell {key:?}")));
            }
            if !c.mean.is_finite() || !c.std.is_finite() || c.std < 0.0 {
                return Err(Error::param(format!("invalid statistics in cell {key:?}")));
            }
            b.cells[i] = StatCell {
                mean: c.mean,
                std: c.std,
            };
        }
        Ok(b)
    }
}

/// Per-entry variant of the estimator: every tensor entry keeps its own
/// `(m, s)` pair. Not part of the transmitted format; it exists to compare
/// payload and prior quality against the scalar statistics.
#[derive(Debug, Clone)]
pub struct ElementwiseStats {
    pub hyper: EstimatorHyper,
    shape: GridShape,
    dims: (usize, usize),
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
    epochs_covered: usize,
}

impl ElementwiseStats {
    pub fn new(hyper: EstimatorHyper, shape: GridShape, n: usize, r: usize) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            shape,
            dims: (n, r),
            means: vec![vec![0.0; n * r]; shape.cell_count()],
            stds: vec![vec![0.0; n * r]; shape.cell_count()],
            epochs_covered: 0,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.shape.scalar_count() * self.dims.0 * self.dims.1
    }

    /// Per-entry `(means, stds)` of one cell, in the factor's row-major order.
    pub fn cell(&self, key: CellKey) -> Option<(&[f64], &[f64])> {
        self.shape
            .index(&key)
            .map(|i| (self.means[i].as_slice(), self.stds[i].as_slice()))
    }

    pub fn ingest_epoch(&mut self, grads: &[LoraGrad]) -> Result<()> {
        let epoch = self.epochs_covered;
        if epoch >= self.shape.epochs {
            return Err(Error::IncompleteGrid("all epochs covered".into()));
        }
        let h = self.hyper;
        let mut covered = vec![false; self.shape.layers * self.shape.modules];
        for g in grads {
            if g.epoch != epoch || g.layer >= self.shape.layers || g.module >= self.shape.modules
            {
                return Err(Error::IncompleteGrid(format!(
                    "unexpected gradient (layer {}, module {}, epoch {})",
                    g.layer, g.module, g.epoch
                )));
            }
            covered[g.layer * self.shape.modules + g.module] = true;
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::IncompleteGrid(format!("epoch {epoch} incomplete")));
        }
        for g in grads {
            for part in Part::BOTH {
                let x = g.part(part).as_slice();
                if x.len() != self.dims.0 * self.dims.1 {
                    return Err(Error::dim("factor size differs from tracker dims"));
                }
                let key = CellKey {
                    part,
                    module: g.module,
                    layer: g.layer,
                    epoch,
                };
                let i = self.shape.index(&key).expect("key inside grid");
                let (m_prev, s_prev) = if epoch == 0 {
                    (vec![0.0; x.len()], vec![0.0; x.len()])
                } else {
                    let j = self
                        .shape
                        .index(&CellKey {
                            epoch: epoch - 1,
                            ..key
                        })
                        .expect("previous epoch inside grid");
                    (self.means[j].clone(), self.stds[j].clone())
                };
                for (e, &xe) in x.iter().enumerate() {
                    let m = h.beta1 * m_prev[e] + (1.0 - h.beta1) * xe;
                    let v = ((xe - m) * (xe - m)).clamp(h.h1, h.h2);
                    self.means[i][e] = m;
                    self.stds[i][e] = update_std(s_prev[e], v, h.beta2);
                }
            }
        }
        self.epochs_covered += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled(rows: usize, cols: usize, v: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| v)
    }

    fn grad(a: Matrix, b: Matrix, layer: usize, module: usize, epoch: usize) -> LoraGrad {
        LoraGrad::new(a, b, layer, module, epoch).unwrap()
    }

    #[test]
    fn mean_examples() {
        let ones = filled(4, 2, 1.0);
        assert!((update_mean(0.0, &ones, 0.99).unwrap() - 0.01).abs() < 1e-15);
        let c = filled(3, 3, 0.37);
        assert_eq!(update_mean(0.37, &c, 0.99).unwrap(), 0.37);

        // Loop oracle vs the closed form c(1 - β1^k).
        let mut m = 0.0;
        for _ in 0..100 {
            m = update_mean(m, &ones, 0.99).unwrap();
        }
        let closed = 1.0 - 0.99f64.powi(100);
        assert!((m - closed).abs() < 1e-12);
        assert!((m - 0.6340).abs() < 1e-4);

        assert!(update_mean(0.0, &Matrix::zeros(0, 0), 0.99).is_err());
        assert!(update_mean(0.0, &ones, 1.0).is_err());
    }

    #[test]
    fn variance_examples() {
        let h = EstimatorHyper::default();
        let c = filled(2, 2, 0.5);
        assert_eq!(update_variance(&c, 0.5, h.h1, h.h2).unwrap(), 1e-5);

        // Entries ±√(2e-3) around 0 have msd 2e-3 > h2.
        let d = 2e-3f64.sqrt();
        let m = Matrix::new(1, 2, vec![d, -d]).unwrap();
        assert_eq!(update_variance(&m, 0.0, h.h1, h.h2).unwrap(), 1e-3);

        let x = Matrix::new(1, 4, vec![0.03, -0.01, 0.01, -0.03]).unwrap();
        let oracle = x.as_slice().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((oracle - 5e-4).abs() < 1e-15);
        let y = Matrix::new(1, 2, vec![0.02, -0.02]).unwrap();
        let v = update_variance(&y, 0.0, h.h1, h.h2).unwrap();
        assert!((v - 4e-4).abs() < 1e-15);
        assert_eq!(update_variance(&x, 0.0, h.h1, h.h2).unwrap(), oracle);

        assert!(update_variance(&x, 0.0, 1e-3, 1e-5).is_err());
    }

    #[test]
    fn std_examples() {
        assert!((update_std(0.0, 1e-3, 0.9) - 0.01).abs() < 1e-15);
        let s0 = 0.0123;
        assert!((update_std(s0, s0 * s0, 0.9) - s0).abs() < 1e-15);

        let mut s = 0.0;
        for _ in 0..20 {
            s = update_std(s, 1e-3, 0.9);
        }
        let closed = (1e-3 * (1.0 - 0.9f64.powi(20))).sqrt();
        assert!((s - closed).abs() < 1e-14);
        assert!((s - 0.029638).abs() < 1e-6);
    }

    #[test]
    fn ingest_single_cell() {
        let mut b = StatsBundle::new(EstimatorHyper::default(), GridShape::new(1, 1, 2)).unwrap();
        b.ingest_epoch(&[grad(filled(4, 2, 1.0), filled(2, 4, 0.0), 0, 0, 0)])
            .unwrap();
        let key = |part, epoch| CellKey {
            part,
            module: 0,
            layer: 0,
            epoch,
        };
        let a0 = b.cell(key(Part::A, 0)).unwrap();
        let b0 = b.cell(key(Part::B, 0)).unwrap();
        assert!((a0.mean - 0.01).abs() < 1e-15);
        assert_eq!(b0.mean, 0.0);

        // Second identical epoch is one more recursion step from epoch 0.
        b.ingest_epoch(&[grad(filled(4, 2, 1.0), filled(2, 4, 0.0), 0, 0, 1)])
            .unwrap();
        let a1 = b.cell(key(Part::A, 1)).unwrap();
        let h = b.hyper;
        let m = update_mean(a0.mean, &filled(4, 2, 1.0), h.beta1).unwrap();
        let v = update_variance(&filled(4, 2, 1.0), m, h.h1, h.h2).unwrap();
        assert_eq!(a1.mean, m);
        assert_eq!(a1.std, update_std(a0.std, v, h.beta2));
        assert!(b.is_complete());
        assert!(b
            .ingest_epoch(&[grad(filled(4, 2, 1.0), filled(2, 4, 0.0), 0, 0, 2)])
            .is_err());
    }

    #[test]
    fn ingest_rejects_incomplete_or_misplaced() {
        let mut b = StatsBundle::new(EstimatorHyper::default(), GridShape::new(2, 1, 1)).unwrap();
        let g = grad(filled(4, 2, 1.0), filled(2, 4, 0.0), 0, 0, 0);
        assert!(matches!(
            b.ingest_epoch(std::slice::from_ref(&g)),
            Err(Error::IncompleteGrid(_))
        ));
        assert!(b.ingest_epoch(&[g.clone(), g.clone()]).is_err());
        let wrong_epoch = grad(filled(4, 2, 1.0), filled(2, 4, 0.0), 1, 0, 3);
        assert!(b.ingest_epoch(&[g, wrong_epoch]).is_err());
        assert_eq!(b.epochs_covered(), 0);
    }

    #[test]
    fn reference_scale_grid_counts() {
        let shape = GridShape::new(32, 4, 20);
        assert_eq!(shape.cell_count(), 5_120);
        assert_eq!(shape.scalar_count(), 10_240);
        let b = StatsBundle::new(EstimatorHyper::default(), shape).unwrap();
        assert_eq!(b.scalar_count(), 2 * 2 * 4 * 32 * 20);
    }

    fn random_bundle(seed: u64) -> StatsBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = GridShape::new(2, 3, 2);
        let mut b = StatsBundle::new(EstimatorHyper::default(), shape).unwrap();
        b.client = Some(4);
        for epoch in 0..2 {
            let grads: Vec<_> = (0..2)
                .flat_map(|layer| (0..3).map(move |module| (layer, module)))
                .map(|(layer, module)| {
                    let a = Matrix::from_fn(6, 2, |_, _| rng.random_range(-0.1..0.1));
                    let bm = Matrix::from_fn(2, 6, |_, _| rng.random_range(-0.1..0.1));
                    grad(a, bm, layer, module, epoch)
                })
                .collect();
            b.ingest_epoch(&grads).unwrap();
        }
        b
    }

    #[test]
    fn empty_bundle_serializes() {
        let b = StatsBundle::new(EstimatorHyper::default(), GridShape::new(0, 0, 0)).unwrap();
        let bytes = b.to_json().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"cells\": []"));
        assert_eq!(StatsBundle::from_json(&bytes).unwrap(), b);
    }

    #[test]
    fn malformed_documents_are_rejected() {
        let b = random_bundle(3);
        let text = String::from_utf8(b.to_json().unwrap()).unwrap();
        let truncated = &text[..text.len() / 2];
        assert!(matches!(
            StatsBundle::from_json(truncated.as_bytes()),
            Err(Error::Parse { .. })
        ));
        let extra = text.replacen("\"hyper\"", "\"bogus\": 1,\n  \"hyper\"", 1);
        assert!(StatsBundle::from_json(extra.as_bytes()).is_err());
        let negative = text.replacen("\"std\": ", "\"std\": -", 1);
        assert!(StatsBundle::from_json(negative.as_bytes()).is_err());
    }

    #[test]
    fn input_order_does_not_matter() {
        let shape = GridShape::new(2, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grads: Vec<_> = (0..4)
            .map(|i| {
                let a = Matrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
                let b = Matrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
                grad(a, b, i / 2, i % 2, 0)
            })
            .collect();
        let mut fwd = StatsBundle::new(EstimatorHyper::default(), shape).unwrap();
        fwd.ingest_epoch(&grads).unwrap();
        let mut rev = StatsBundle::new(EstimatorHyper::default(), shape).unwrap();
        let reversed: Vec<_> = grads.iter().rev().cloned().collect();
        rev.ingest_epoch(&reversed).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn elementwise_tracker_payload() {
        let shape = GridShape::new(1, 1, 1);
        let mut t = ElementwiseStats::new(EstimatorHyper::default(), shape, 4, 2).unwrap();
        t.ingest_epoch(&[grad(filled(4, 2, 1.0), filled(2, 4, 0.0), 0, 0, 0)])
            .unwrap();
        assert_eq!(t.scalar_count(), 2 * 2 * 8);
        let (m, s) = t
            .cell(CellKey {
                part: Part::A,
                module: 0,
                layer: 0,
                epoch: 0,
            })
            .unwrap();
        assert!(m.iter().all(|&v| (v - 0.01).abs() < 1e-15));
        assert!(s.iter().all(|&v| (v - update_std(0.0, 1e-3, 0.9)).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>()) {
            let b = random_bundle(seed);
            let back = StatsBundle::from_json(&b.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, b);
        }

        #[test]
        fn constant_stream_contracts_geometrically(m0 in -5.0f64..5.0, c in -5.0f64..5.0) {
            let x = filled(2, 2, c);
            let mut m = m0;
            for k in 1..=1000 {
                m = update_mean(m, &x, 0.99).unwrap();
                if k % 100 == 0 {
                    let expected = (m0 - c).abs() * 0.99f64.powi(k);
                    prop_assert!(((m - c).abs() - expected).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn variance_always_clamped(vals in proptest::collection::vec(-1.0f64..1.0, 1..40), m in -1.0f64..1.0) {
            let x = Matrix::new(1, vals.len(), vals).unwrap();
            let v = update_variance(&x, m, 1e-5, 1e-3).unwrap();
            prop_assert!((1e-5..=1e-3).contains(&v));
            let s = update_std(0.0, v, 0.9);
            prop_assert!(s > 0.0 && s <= 1e-3f64.sqrt());
        }
    }
}
