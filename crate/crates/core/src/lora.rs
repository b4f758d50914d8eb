//! Low-rank gradient factors: norms, clipping and reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Which factor of a low-rank pair a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    A,
    B,
}

impl Part {
    pub const BOTH: [Part; 2] = [Part::A, Part::B];

    pub fn as_str(self) -> &'static str {
        match self {
            Part::A => "A",
            Part::B => "B",
        }
    }
}

/// One client's low-rank gradient for one adapted weight: `G ≈ A·B` with
/// `A: n×r` and `B: r×n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraGrad {
    pub a: Matrix,
    pub b: Matrix,
    pub layer: usize,
    /// Index of the adapted projection within the layer.
    pub module: usize,
    pub epoch: usize,
}

impl LoraGrad {
    pub fn new(a: Matrix, b: Matrix, layer: usize, module: usize, epoch: usize) -> Result<Self> {
        let g = Self {
            a,
            b,
            layer,
            module,
            epoch,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, r) = self.a.shape();
        if r == 0 {
            return Err(Error::dim("rank must be at least 1"));
        }
        if self.b.rows() != r {
            return Err(Error::dim(format!(
                "A is {n}x{r} but B has {} rows",
                self.b.rows()
            )));
        }
        if n < r {
            return Err(Error::dim(format!("n = {n} is smaller than rank {r}")));
        }
        Ok(())
    }

    /// `(n, r)`
    pub fn shape(&self) -> (usize, usize) {
        self.a.shape()
    }

    pub fn part(&self, part: Part) -> &Matrix {
        match part {
            Part::A => &self.a,
            Part::B => &self.b,
        }
    }
}

/// `√(Σ x²)`, rejecting non-finite entries.
pub fn frobenius_norm(m: &Matrix) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::NonFinite("frobenius_norm input"));
    }
    Ok(m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt())
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Reconstructs the dense `n×n` update `A·B`.
pub fn lowrank_product(g: &LoraGrad) -> Result<Matrix> {
    g.validate()?;
    g.a.matmul(&g.b)
}

/// Scale factor `min(1, c/‖x‖)` for a tensor of norm `norm`. Infinite `c`
/// disables clipping; a zero tensor keeps factor 1.
pub(crate) fn clip_scale(norm: f64, c: f64) -> f64 {
    if norm == 0.0 || norm <= c {
        1.0
    } else {
        c / norm
    }
}

/// `x · min(1, c/‖x‖_F)`. Tensors already inside the ball are returned
/// unchanged bit for bit.
pub fn clip_factor(x: &Matrix, c: f64) -> Result<Matrix> {
    if c.is_nan() || c <= 0.0 {
        return Err(Error::param(format!("clip bound must be positive, got {c}")));
    }
    let s = clip_scale(frobenius_norm(x)?, c);
    Ok(if s == 1.0 { x.clone() } else { x.scale(s) })
}

/// Slice version of [`clip_factor`] used for latent vectors.
pub(crate) fn clip_in_place(x: &mut [f64], c: f64) {
    let s = clip_scale(l2_norm(x), c);
    if s != 1.0 {
        x.iter_mut().for_each(|v| *v *= s);
    }
}
