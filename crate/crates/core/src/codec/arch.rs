//! Codec architectures.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{ConvGeom, Layer, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CodecProfile {
    /// Pass-through with `latent_dim = n·2r`; a test fixture, not a compressor.
    Identity,
    /// Dense tanh autoencoder, one hidden layer on each side.
    #[default]
    MlpDesk,
    /// Strided convolution stack mirrored by transposed convolutions.
    ConvSkeleton,
}

/// How the two factors are presented to the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CodecLayout {
    /// One input block `[A | Bᵀ]` of shape `n × 2r`.
    #[default]
    Stacked,
    /// The same networks applied to `A` and to `Bᵀ` separately (`n × r` each).
    PerPart,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecArch {
    pub profile: CodecProfile,
    pub layout: CodecLayout,
    /// Factor shape: `A` is `n × r`, `B` is `r × n`.
    pub n: usize,
    pub r: usize,
    /// Total latent length over both factors.
    pub latent_dim: usize,
    /// Hidden width of the dense profile; unused otherwise.
    pub hidden: usize,
    /// Channel progression of the conv profile, input channel first.
    pub channels: Vec<usize>,
}

/// Channels of the downsampling stack: one stride-1 convolution followed by
/// six stride-2 convolutions doubling the channel count.
pub const CONV_CHANNELS: [usize; 8] = [1, 1, 2, 4, 8, 16, 32, 64];

impl CodecArch {
    /// Default sizing for a profile: `latent_dim = n·2r/16`, hidden width
    /// twice the latent.
    pub fn new(profile: CodecProfile, layout: CodecLayout, n: usize, r: usize) -> Result<Self> {
        if n == 0 || r == 0 {
            return Err(Error::param("codec needs n, r >= 1"));
        }
        let d = 2 * n * r;
        let mut arch = Self {
            profile,
            layout,
            n,
            r,
            latent_dim: d,
            hidden: 0,
            channels: Vec::new(),
        };
        match profile {
            CodecProfile::Identity => {}
            CodecProfile::MlpDesk => {
                arch.latent_dim = (d / 16).max(2) & !1;
                arch.hidden = 2 * arch.latent_dim;
            }
            CodecProfile::ConvSkeleton => {
                arch.channels = CONV_CHANNELS.to_vec();
                let (h, w) = arch.block_shape();
                let geoms = conv_stack(&arch.channels, h, w);
                let last = geoms.last().expect("non-empty stack");
                arch.latent_dim = last.out_ch * last.out_h * last.out_w * arch.blocks();
            }
        }
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_hidden(mut self, hidden: usize) -> Result<Self> {
        self.hidden = hidden;
        self.validate()?;
        Ok(self)
    }

    pub fn with_latent_dim(mut self, latent_dim: usize) -> Result<Self> {
        self.latent_dim = latent_dim;
        self.validate()?;
        Ok(self)
    }

    /// `n · 2r`
    pub fn input_dim(&self) -> usize {
        2 * self.n * self.r
    }

    /// Number of network applications per gradient pair.
    fn blocks(&self) -> usize {
        match self.layout {
            CodecLayout::Stacked => 1,
            CodecLayout::PerPart => 2,
        }
    }

    /// Shape of one network input block.
    pub fn block_shape(&self) -> (usize, usize) {
        match self.layout {
            CodecLayout::Stacked => (self.n, 2 * self.r),
            CodecLayout::PerPart => (self.n, self.r),
        }
    }

    pub fn block_latent(&self) -> usize {
        self.latent_dim / self.blocks()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.r == 0 {
            return Err(Error::param("codec needs n, r >= 1"));
        }
        if self.latent_dim == 0 || self.latent_dim % 2 != 0 {
            return Err(Error::param(format!(
                "latent_dim must be a positive even number, got {}",
                self.latent_dim
            )));
        }
        let d = self.input_dim();
        match self.profile {
            CodecProfile::Identity => {
                if self.latent_dim != d {
                    return Err(Error::param("identity codec needs latent_dim = n·2r"));
                }
            }
            CodecProfile::MlpDesk | CodecProfile::ConvSkeleton => {
                if self.latent_dim >= d {
                    return Err(Error::param(format!(
                        "latent_dim {} does not compress input of size {d}",
                        self.latent_dim
                    )));
                }
            }
        }
        if self.profile == CodecProfile::MlpDesk && self.hidden == 0 {
            return Err(Error::param("mlp-desk needs a hidden width"));
        }
        if self.profile == CodecProfile::ConvSkeleton {
            if self.channels.len() < 2 || self.channels[0] != 1 {
                return Err(Error::param("conv channel progression must start at 1"));
            }
            let (h, w) = self.block_shape();
            let last = *conv_stack(&self.channels, h, w).last().expect("non-empty");
            if last.out_ch * last.out_h * last.out_w * self.blocks() != self.latent_dim {
                return Err(Error::param("latent_dim disagrees with the conv stack"));
            }
        }
        Ok(())
    }

    /// Fresh encoder and decoder networks.
    pub fn build(&self, rng: &mut impl Rng) -> (Network, Network) {
        let (h, w) = self.block_shape();
        let width = h * w;
        let latent = self.block_latent();
        let (enc, dec) = match self.profile {
            CodecProfile::Identity => (vec![Layer::identity(width)], vec![Layer::identity(width)]),
            CodecProfile::MlpDesk => (
                vec![
                    Layer::dense(width, self.hidden, rng),
                    Layer::tanh(self.hidden),
                    Layer::dense(self.hidden, latent, rng),
                ],
                vec![
                    Layer::dense(latent, self.hidden, rng),
                    Layer::tanh(self.hidden),
                    Layer::dense(self.hidden, width, rng),
                ],
            ),
            CodecProfile::ConvSkeleton => {
                let geoms = conv_stack(&self.channels, h, w);
                let mut enc = Vec::new();
                for (i, g) in geoms.iter().enumerate() {
                    if i > 0 {
                        enc.push(Layer::tanh(g.in_ch * g.in_h * g.in_w));
                    }
                    enc.push(Layer::conv(*g, rng));
                }
                let mut dec = Vec::new();
                for g in geoms.iter().rev() {
                    let t = ConvGeom::transposed(g.out_ch, g.in_ch, g.kernel, g.stride, g.pad, g.out_h, g.out_w, g.in_h, g.in_w);
                    dec.push(Layer::conv_transpose(t, rng));
                    dec.push(Layer::tanh(g.in_ch * g.in_h * g.in_w));
                }
                // Final smoothing convolution, 7×7 with same padding.
                dec.push(Layer::conv(ConvGeom::conv(1, 1, 7, 1, 3, h, w), rng));
                (enc, dec)
            }
        };
        (
            Network::new(enc).expect("architecture wiring is consistent"),
            Network::new(dec).expect("architecture wiring is consistent"),
        )
    }
}

/// Geometry of the downsampling stack: 3×3 kernels with padding 1, stride 1
/// for the first layer and 2 afterwards.
fn conv_stack(channels: &[usize], h: usize, w: usize) -> Vec<ConvGeom> {
    let mut out = Vec::new();
    let (mut h, mut w) = (h, w);
    for (i, pair) in channels.windows(2).enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let g = ConvGeom::conv(pair[0], pair[1], 3, stride, 1, h, w);
        h = g.out_h;
        w = g.out_w;
        out.push(g);
    }
    out
}
