//! The randomized mechanism: encode, clip, noise, aggregate, decode, update.
//!
//! Only the noise stage draws randomness. Every client gets its own stream
//! keyed by `(seed, round, slot, client, part)`, and aggregation is a single
//! ordered reduction over ascending client ids, so results do not depend on
//! how per-client work is scheduled.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{CodecModel, Latent};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lora::{clip_factor, clip_in_place, frobenius_norm, LoraGrad};
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};

/// Gaussian noise for the transmitted factors. Each entry receives
/// `N(0, (2σ/K)²)`: sensitivity `2/K` times the multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub k: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, k: usize, seed: u64) -> Result<Self> {
        let spec = Self { sigma, k, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::param(format!("noise multiplier must be >= 0, got {}", self.sigma)));
        }
        if self.k == 0 {
            return Err(Error::param("noise needs K >= 1 selected clients"));
        }
        Ok(())
    }

    /// `2σ/K`
    pub fn std(&self) -> f64 {
        2.0 * self.sigma / self.k as f64
    }
}

fn add_noise(x: &mut [f64], std: f64, rng: &mut impl Rng) {
    if std == 0.0 {
        return;
    }
    for v in x {
        let z: f64 = StandardNormal.sample(rng);
        *v += std * z;
    }
}

/// `x + N(0, (2σ/K)²)` elementwise, from the stream seeded by `spec.seed`.
/// With `σ = 0` the input is returned bit for bit.
pub fn noise_factor(x: &Matrix, spec: &NoiseSpec) -> Result<Matrix> {
    spec.validate()?;
    let mut out = x.clone();
    let mut rng = rng::stream(spec.seed, Purpose::Noise, &[]);
    add_noise(out.as_mut_slice(), spec.std(), &mut rng);
    Ok(out)
}

/// `(1/K) Σ Ãᵢ·B̃ᵢ`, reduced in slice order.
pub fn aggregate(parts: &[(Matrix, Matrix)]) -> Result<Matrix> {
    let Some((a0, b0)) = parts.first() else {
        return Err(Error::param("cannot aggregate an empty client set"));
    };
    let shape = (a0.rows(), b0.cols());
    let mut acc = Matrix::zeros(shape.0, shape.1);
    for (a, b) in parts {
        if a.shape() != a0.shape() || b.shape() != b0.shape() {
            return Err(Error::dim(format!(
                "client factors {:?}/{:?} differ from {:?}/{:?}",
                a.shape(),
                b.shape(),
                a0.shape(),
                b0.shape()
            )));
        }
        acc.add_scaled(&a.matmul(b)?, 1.0)?;
    }
    Ok(acc.scale(1.0 / parts.len() as f64))
}

/// `w − η·g`
pub fn apply_update(w: &Matrix, g: &Matrix, eta: f64) -> Result<Matrix> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::param(format!("step size must be positive, got {eta}")));
    }
    let mut out = w.clone();
    out.add_scaled(g, -eta)?;
    Ok(out)
}

/// Where the server decodes relative to aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServerOrder {
    /// Decode every client's latents, then average the products.
    #[default]
    DecodeThenAggregate,
    /// Average the latents, decode once, and form a single product.
    AggregateThenDecode,
}

/// The composed mechanism for one adapted weight.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub codec: &'a CodecModel,
    /// Clip bound per latent half; `f64::INFINITY` disables clipping.
    pub clip: f64,
    pub sigma: f64,
    pub seed: u64,
    pub order: ServerOrder,
}

/// What a client sends for one adapted weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub client: usize,
    pub latent: Latent,
}

impl Pipeline<'_> {
    /// Client side: encode, clip each half, add noise.
    /// `k` is the number of clients selected this round.
    pub fn transmit(&self, client: usize, g: &LoraGrad, k: usize, round: usize, slot: usize) -> Result<Transmission> {
        let spec = NoiseSpec::new(self.sigma, k, self.seed)?;
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::param(format!("clip bound must be positive, got {}", self.clip)));
        }
        let mut latent = self.codec.encode(g).map_err(|e| e.in_stage("encode"))?;
        if latent.a.iter().chain(&latent.b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoded latent").in_stage("encode"));
        }
        clip_in_place(&mut latent.a, self.clip);
        clip_in_place(&mut latent.b, self.clip);
        let std = spec.std();
        for (part, half) in [&mut latent.a, &mut latent.b].into_iter().enumerate() {
            let mut rng = rng::stream(
                self.seed,
                Purpose::Noise,
                &[round as u64, slot as u64, client as u64, part as u64],
            );
            add_noise(half, std, &mut rng);
        }
        Ok(Transmission { client, latent })
    }

    /// Server side: the decoded aggregate update for one adapted weight.
    /// Transmissions must be in ascending client order.
    pub fn receive(&self, sent: &[Transmission]) -> Result<Matrix> {
        if sent.is_empty() {
            return Err(Error::param("no transmissions to aggregate").in_stage("aggregate"));
        }
        if sent.windows(2).any(|w| w[0].client >= w[1].client) {
            return Err(Error::param("transmissions must be sorted by client id").in_stage("aggregate"));
        }
        match self.order {
            ServerOrder::DecodeThenAggregate => {
                let mut parts = Vec::with_capacity(sent.len());
                for t in sent {
                    parts.push(self.codec.decode(&t.latent).map_err(|e| e.in_stage("decode"))?);
                }
                aggregate(&parts).map_err(|e| e.in_stage("aggregate"))
            }
            ServerOrder::AggregateThenDecode => {
                let len = sent[0].latent.len();
                let mut mean = vec![0.0; len];
                for t in sent {
                    if t.latent.len() != len {
                        return Err(Error::dim("latent lengths differ").in_stage("aggregate"));
                    }
                    for (m, v) in mean.iter_mut().zip(t.latent.concat()) {
                        *m += v;
                    }
                }
                let k = sent.len() as f64;
                mean.iter_mut().for_each(|m| *m /= k);
                let (a, b) = self
                    .codec
                    .decode(&Latent::split(mean))
                    .map_err(|e| e.in_stage("decode"))?;
                a.matmul(&b).map_err(|e| e.in_stage("aggregate"))
            }
        }
    }

    /// Full mechanism for one adapted weight over the selected clients,
    /// given as `(client id, gradient)` in ascending id order.
    pub fn run(&self, inputs: &[(usize, &LoraGrad)], round: usize, slot: usize, exec: Execution) -> Result<Matrix> {
        let k = inputs.len();
        let sent = exec
            .map(inputs, |&(client, g)| {
                self.transmit(client, g, k, round, slot).map_err(|e| Error::ClientFailure {
                    client,
                    round,
                    reason: e.to_string(),
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        self.receive(&sent)
    }
}

/// One client's clipped factors in a sensitivity probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedClient {
    pub client: usize,
    pub a: Matrix,
    pub b: Matrix,
}

const CLIP_SLACK: f64 = 1e-9;

/// `‖agg(set1) − agg(set2)‖_F` for two client sets of equal size that differ
/// in exactly one client. Factors must already be clipped to norm 1.
pub fn sensitivity_probe(set1: &[ClippedClient], set2: &[ClippedClient]) -> Result<f64> {
    if set1.len() != set2.len() || set1.is_empty() {
        return Err(Error::param("adjacent sets must have the same nonzero size"));
    }
    for c in set1.iter().chain(set2) {
        if frobenius_norm(&c.a)? > 1.0 + CLIP_SLACK || frobenius_norm(&c.b)? > 1.0 + CLIP_SLACK {
            return Err(Error::param(format!("client {} is not clipped to norm 1", c.client)));
        }
    }
    let differing = set1.iter().zip(set2).filter(|(x, y)| x != y).count();
    if differing != 1 {
        return Err(Error::param(format!(
            "sets must differ in exactly one client, found {differing}"
        )));
    }
    let pairs = |s: &[ClippedClient]| s.iter().map(|c| (c.a.clone(), c.b.clone())).collect::<Vec<_>>();
    let d = aggregate(&pairs(set1))?.sub(&aggregate(&pairs(set2))?)?;
    frobenius_norm(&d)
}

/// Clips both factors of `g` to norm `c`, for building probe inputs.
pub fn clip_client(client: usize, a: &Matrix, b: &Matrix, c: f64) -> Result<ClippedClient> {
    Ok(ClippedClient {
        client,
        a: clip_factor(a, c)?,
        b: clip_factor(b, c)?,
    })
}
