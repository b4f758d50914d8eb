//! Gradient codec: an autoencoder over LoRA factor pairs, pretrained on
//! synthetic gradients drawn from transmitted statistics.
//!
//! A codec consumes the pair `(A, B)` as the block `[A | Bᵀ]` and emits a
//! [`Latent`] with one half per factor, so downstream clipping and noise can
//! treat the halves as the transmitted stand-ins for `A` and `B`.

mod arch;
pub mod net;
mod synth;
mod train;

pub use arch::{CodecArch, CodecLayout, CodecProfile, CONV_CHANNELS};
pub use synth::{sample_pair, sample_synthetic, SyntheticBatch, SyntheticSource};
pub use train::{reconstruction_loss, train_codec, train_codec_on_pairs, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::lora::LoraGrad;
use crate::matrix::Matrix;
use crate::rng::{self, Purpose};
use net::Network;

pub const ARTIFACT_FORMAT: &str = "privlora-codec";
pub const ARTIFACT_VERSION: u32 = 1;

/// Encoded factor pair. For the identity codec `a` is `A` and `b` is `Bᵀ`,
/// both flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Latent {
    pub fn len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut z = self.a.clone();
        z.extend_from_slice(&self.b);
        z
    }

    pub fn split(z: Vec<f64>) -> Self {
        let mut a = z;
        let b = a.split_off(a.len() / 2);
        Self { a, b }
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecModel {
    pub arch: CodecArch,
    pub encoder: Network,
    pub decoder: Network,
}

// Parameter vectors are far too long to be useful in panic messages.
impl std::fmt::Debug for CodecModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CodecModel")
            .field("arch", &self.arch)
            .field("encoder_params", &self.encoder.param_count())
            .field("decoder_params", &self.decoder.param_count())
            .finish()
    }
}

impl CodecModel {
    /// Freshly initialised model; identical seeds give identical parameters.
    pub fn init(arch: CodecArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, Purpose::CodecInit, &[]);
        let (encoder, decoder) = arch.build(&mut rng);
        Ok(Self { arch, encoder, decoder })
    }

    pub fn identity(n: usize, r: usize) -> Result<Self> {
        Self::init(CodecArch::new(CodecProfile::Identity, CodecLayout::Stacked, n, r)?, 0)
    }

    /// `(n, 2r)`
    pub fn input_shape(&self) -> (usize, usize) {
        (self.arch.n, 2 * self.arch.r)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        let (h, w) = self.arch.block_shape();
        if self.encoder.input_len() != h * w
            || self.encoder.output_len() != self.arch.block_latent()
            || self.decoder.input_len() != self.arch.block_latent()
            || self.decoder.output_len() != h * w
        {
            return Err(Error::dim("codec networks do not match the declared architecture"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }

    pub fn encode(&self, g: &LoraGrad) -> Result<Latent> {
        encode_with(&self.arch, &self.encoder, &g.a, &g.b)
    }

    pub fn encode_factors(&self, a: &Matrix, b: &Matrix) -> Result<Latent> {
        encode_with(&self.arch, &self.encoder, a, b)
    }

    /// Returns `(A, B)` with `A: n × r`, `B: r × n`.
    pub fn decode(&self, z: &Latent) -> Result<(Matrix, Matrix)> {
        decode_with(&self.arch, &self.decoder, z)
    }

    /// `Dec(Enc(x))` on the packed network input, one block at a time.
    pub(crate) fn reconstruct_block(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(&self.encoder.forward(x)?)
    }
}

/// Network input blocks for a factor pair.
pub(crate) fn pack(arch: &CodecArch, a: &Matrix, b: &Matrix) -> Result<Vec<Vec<f64>>> {
    let (n, r) = (arch.n, arch.r);
    if a.shape() != (n, r) || b.shape() != (r, n) {
        return Err(Error::dim(format!(
            "codec expects A {n}x{r} and B {r}x{n}, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let bt = b.transpose();
    Ok(match (arch.layout, arch.profile) {
        (CodecLayout::PerPart, _) => vec![a.as_slice().to_vec(), bt.as_slice().to_vec()],
        (CodecLayout::Stacked, CodecProfile::ConvSkeleton) => {
            // Image layout: row i is [A(i,·), Bᵀ(i,·)].
            vec![a.hstack(&bt)?.into_vec()]
        }
        (CodecLayout::Stacked, _) => {
            let mut x = a.as_slice().to_vec();
            x.extend_from_slice(bt.as_slice());
            vec![x]
        }
    })
}

/// Inverse of [`pack`].
pub(crate) fn unpack(arch: &CodecArch, blocks: Vec<Vec<f64>>) -> Result<(Matrix, Matrix)> {
    let (n, r) = (arch.n, arch.r);
    let (a, bt) = match (arch.layout, arch.profile) {
        (CodecLayout::PerPart, _) => {
            let mut it = blocks.into_iter();
            let a = Matrix::new(n, r, it.next().unwrap_or_default())?;
            let bt = Matrix::new(n, r, it.next().unwrap_or_default())?;
            (a, bt)
        }
        (CodecLayout::Stacked, CodecProfile::ConvSkeleton) => {
            let img = Matrix::new(n, 2 * r, blocks.into_iter().next().unwrap_or_default())?;
            (img.columns(0, r)?, img.columns(r, r)?)
        }
        (CodecLayout::Stacked, _) => {
            let mut a = blocks.into_iter().next().unwrap_or_default();
            if a.len() != 2 * n * r {
                return Err(Error::dim("decoded block has the wrong length"));
            }
            let bt = a.split_off(n * r);
            (Matrix::new(n, r, a)?, Matrix::new(n, r, bt)?)
        }
    };
    Ok((a, bt.transpose()))
}

fn encode_with(arch: &CodecArch, encoder: &Network, a: &Matrix, b: &Matrix) -> Result<Latent> {
    let blocks = pack(arch, a, b)?;
    match arch.layout {
        CodecLayout::Stacked => Ok(Latent::split(encoder.forward(&blocks[0])?)),
        CodecLayout::PerPart => Ok(Latent {
            a: encoder.forward(&blocks[0])?,
            b: encoder.forward(&blocks[1])?,
        }),
    }
}

fn decode_with(arch: &CodecArch, decoder: &Network, z: &Latent) -> Result<(Matrix, Matrix)> {
    let half = arch.latent_dim / 2;
    if z.a.len() != half || z.b.len() != half {
        return Err(Error::dim(format!(
            "decoder expects two latent halves of {half}, got {} and {}",
            z.a.len(),
            z.b.len()
        )));
    }
    let blocks = match arch.layout {
        CodecLayout::Stacked => vec![decoder.forward(&z.concat())?],
        CodecLayout::PerPart => vec![decoder.forward(&z.a)?, decoder.forward(&z.b)?],
    };
    unpack(arch, blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encoder,
    Decoder,
}

/// Serialized half of a codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format: String,
    version: u32,
    role: Role,
    config_hash: String,
    arch: CodecArch,
    network: Network,
}

impl Container {
    fn check(self, role: Role) -> Result<Self> {
        if self.format != ARTIFACT_FORMAT || self.version != ARTIFACT_VERSION {
            return Err(Error::param(format!(
                "unsupported codec container {} v{}",
                self.format, self.version
            )));
        }
        if self.role != role {
            return Err(Error::param(format!("expected a {role:?} artifact, found {:?}", self.role)));
        }
        self.arch.validate()?;
        self.network.validate()?;
        Ok(self)
    }
}

/// Client-side half: maps factor pairs to latents.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderArtifact {
    pub arch: CodecArch,
    pub config_hash: String,
    network: Network,
}

/// Server-side half: maps latents back to factor pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderArtifact {
    pub arch: CodecArch,
    pub config_hash: String,
    network: Network,
}

/// Splits a trained model into independently serializable halves.
pub fn split_and_dispatch(model: &CodecModel, config_hash: &str) -> (EncoderArtifact, DecoderArtifact) {
    (
        EncoderArtifact {
            arch: model.arch.clone(),
            config_hash: config_hash.to_owned(),
            network: model.encoder.clone(),
        },
        DecoderArtifact {
            arch: model.arch.clone(),
            config_hash: config_hash.to_owned(),
            network: model.decoder.clone(),
        },
    )
}

impl EncoderArtifact {
    pub fn encode(&self, a: &Matrix, b: &Matrix) -> Result<Latent> {
        encode_with(&self.arch, &self.network, a, b)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        json::to_vec_pretty(&Container {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            role: Role::Encoder,
            config_hash: self.config_hash.clone(),
            arch: self.arch.clone(),
            network: self.network.clone(),
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c = json::from_slice::<Container>(bytes)?.check(Role::Encoder)?;
        let (h, w) = c.arch.block_shape();
        if c.network.input_len() != h * w || c.network.output_len() != c.arch.block_latent() {
            return Err(Error::dim("encoder network does not match its architecture"));
        }
        Ok(Self {
            arch: c.arch,
            config_hash: c.config_hash,
            network: c.network,
        })
    }
}

impl DecoderArtifact {
    pub fn decode(&self, z: &Latent) -> Result<(Matrix, Matrix)> {
        decode_with(&self.arch, &self.network, z)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        json::to_vec_pretty(&Container {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            role: Role::Decoder,
            config_hash: self.config_hash.clone(),
            arch: self.arch.clone(),
            network: self.network.clone(),
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c = json::from_slice::<Container>(bytes)?.check(Role::Decoder)?;
        let (h, w) = c.arch.block_shape();
        if c.network.input_len() != c.arch.block_latent() || c.network.output_len() != h * w {
            return Err(Error::dim("decoder network does not match its architecture"));
        }
        Ok(Self {
            arch: c.arch,
            config_hash: c.config_hash,
            network: c.network,
        })
    }
}

/// Reassembles a model from its halves; both must come from the same run.
pub fn assemble(enc: &EncoderArtifact, dec: &DecoderArtifact) -> Result<CodecModel> {
    if enc.arch != dec.arch || enc.config_hash != dec.config_hash {
        return Err(Error::param("encoder and decoder artifacts come from different codecs"));
    }
    let model = CodecModel {
        arch: enc.arch.clone(),
        encoder: enc.network.clone(),
        decoder: dec.network.clone(),
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(n: usize, r: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
        (a, b)
    }

    #[test]
    fn identity_codec_round_trips_exactly() {
        let model = CodecModel::identity(6, 2).unwrap();
        let (a, b) = random_pair(6, 2, 1);
        let z = model.encode_factors(&a, &b).unwrap();
        assert_eq!(z.a, a.as_slice());
        assert_eq!(z.b, b.transpose().as_slice());
        let (a2, b2) = model.decode(&z).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn packing_round_trips_for_every_layout() {
        for profile in [CodecProfile::Identity, CodecProfile::MlpDesk, CodecProfile::ConvSkeleton] {
            for layout in [CodecLayout::Stacked, CodecLayout::PerPart] {
                let Ok(arch) = CodecArch::new(profile, layout, 16, 4) else {
                    continue;
                };
                let (a, b) = random_pair(16, 4, 2);
                let blocks = pack(&arch, &a, &b).unwrap();
                let (a2, b2) = unpack(&arch, blocks).unwrap();
                assert_eq!((a2, b2), (a.clone(), b.clone()), "{profile:?} {layout:?}");
            }
        }
    }

    #[test]
    fn shapes_are_preserved_and_zero_input_is_finite() {
        for profile in [CodecProfile::MlpDesk, CodecProfile::ConvSkeleton] {
            for layout in [CodecLayout::Stacked, CodecLayout::PerPart] {
                let arch = CodecArch::new(profile, layout, 64, 8).unwrap();
                let model = CodecModel::init(arch.clone(), 3).unwrap();
                let z = model
                    .encode_factors(&Matrix::zeros(64, 8), &Matrix::zeros(8, 64))
                    .unwrap();
                assert_eq!(z.len(), arch.latent_dim);
                let (a, b) = model.decode(&z).unwrap();
                assert_eq!((a.shape(), b.shape()), ((64, 8), (8, 64)));
                assert!(a.is_finite() && b.is_finite());
            }
        }
    }

    #[test]
    fn wrong_shapes_are_dimension_errors() {
        let model = CodecModel::init(
            CodecArch::new(CodecProfile::MlpDesk, CodecLayout::Stacked, 8, 2).unwrap(),
            0,
        )
        .unwrap();
        let (a, b) = random_pair(8, 3, 0);
        assert!(matches!(model.encode_factors(&a, &b), Err(Error::Dimension(_))));
        let bad = Latent {
            a: vec![0.0; 3],
            b: vec![0.0; 3],
        };
        assert!(matches!(model.decode(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn split_halves_compose_to_the_full_model() {
        let arch = CodecArch::new(CodecProfile::MlpDesk, CodecLayout::Stacked, 16, 4).unwrap();
        let model = CodecModel::init(arch, 9).unwrap();
        let (enc, dec) = split_and_dispatch(&model, "abc");
        let enc2 = EncoderArtifact::from_json(&enc.to_json().unwrap()).unwrap();
        let dec2 = DecoderArtifact::from_json(&dec.to_json().unwrap()).unwrap();
        assert_eq!(enc2, enc);
        assert_eq!(dec2, dec);
        for seed in 0..100 {
            let (a, b) = random_pair(16, 4, seed);
            let z = model.encode_factors(&a, &b).unwrap();
            let full = model.decode(&z).unwrap();
            let z2 = enc2.encode(&a, &b).unwrap();
            assert_eq!(z2, z);
            assert_eq!(dec2.decode(&z2).unwrap(), full);
        }
        assert_eq!(assemble(&enc2, &dec2).unwrap(), model);
    }

    #[test]
    fn decoder_rejects_encoder_input_and_wrong_role() {
        let arch = CodecArch::new(CodecProfile::MlpDesk, CodecLayout::Stacked, 16, 4).unwrap();
        let model = CodecModel::init(arch, 9).unwrap();
        let (enc, dec) = split_and_dispatch(&model, "h");
        let (a, b) = random_pair(16, 4, 0);
        let as_latent = Latent::split(pack(&model.arch, &a, &b).unwrap().remove(0));
        assert!(matches!(dec.decode(&as_latent), Err(Error::Dimension(_))));
        assert!(DecoderArtifact::from_json(&enc.to_json().unwrap()).is_err());
    }
}
