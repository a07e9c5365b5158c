//! Encoder/decoder seam between image space and the diffusion latent
//! space. Two fixed codecs ship: identity, and 4× mean pooling with
//! nearest-neighbour upsampling. A learned codec can implement
//! [`LatentCodec`] without touching the samplers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::LatentGrid;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("image {height}x{width} not divisible by factor {factor}")]
    Indivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("expected {expected} channels, got {actual}")]
    Channels { expected: usize, actual: usize },
    #[error("invalid codec spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    Pool4,
}

impl std::str::FromStr for CodecKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(CodecKind::Identity),
            "pool4" => Ok(CodecKind::Pool4),
            other => Err(format!("unknown codec `{other}`")),
        }
    }
}

impl CodecKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CodecKind::Identity => "identity",
            CodecKind::Pool4 => "pool4",
        }
    }
}

pub trait LatentCodec: Send + Sync {
    fn encode(&self, image: &LatentGrid) -> Result<LatentGrid, CodecError>;
    fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid, CodecError>;
    /// Image pixels per latent cell along each axis.
    fn spatial_factor(&self) -> usize;
    fn latent_channels(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub kind: CodecKind,
    pub image_channels: usize,
    pub latent_channels: usize,
    pub spatial_factor: usize,
}

impl CodecSpec {
    pub fn identity(channels: usize) -> Self {
        Self {
            kind: CodecKind::Identity,
            image_channels: channels,
            latent_channels: channels,
            spatial_factor: 1,
        }
    }

    pub fn pool4(channels: usize) -> Self {
        Self {
            kind: CodecKind::Pool4,
            image_channels: channels,
            latent_channels: channels,
            spatial_factor: 4,
        }
    }

    pub fn new(kind: CodecKind, channels: usize) -> Self {
        match kind {
            CodecKind::Identity => Self::identity(channels),
            CodecKind::Pool4 => Self::pool4(channels),
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let ok = match self.kind {
            CodecKind::Identity => {
                self.spatial_factor == 1 && self.latent_channels == self.image_channels
            }
            CodecKind::Pool4 => {
                self.spatial_factor == 4 && self.latent_channels == self.image_channels
            }
        };
        if !ok || self.image_channels == 0 {
            return Err(CodecError::InvalidSpec(format!("{self:?}")));
        }
        Ok(())
    }
}

pub fn encode(image: &LatentGrid, spec: &CodecSpec) -> Result<LatentGrid, CodecError> {
    spec.validate()?;
    if image.channels() != spec.image_channels {
        return Err(CodecError::Channels {
            expected: spec.image_channels,
            actual: image.channels(),
        });
    }
    let f = spec.spatial_factor;
    let (c, h, w) = image.shape();
    if h % f != 0 || w % f != 0 {
        return Err(CodecError::Indivisible {
            height: h,
            width: w,
            factor: f,
        });
    }
    match spec.kind {
        CodecKind::Identity => Ok(image.clone()),
        CodecKind::Pool4 => {
            let (lh, lw) = (h / f, w / f);
            let mut out = LatentGrid::zeros(c, lh, lw);
            let norm = 1.0 / (f * f) as f64;
            for ch in 0..c {
                for ly in 0..lh {
                    for lx in 0..lw {
                        let mut acc = 0.0;
                        for y in ly * f..(ly + 1) * f {
                            for x in lx * f..(lx + 1) * f {
                                acc += image.get(ch, y, x);
                            }
                        }
                        out.set(ch, ly, lx, acc * norm);
                    }
                }
            }
            Ok(out)
        }
    }
}

pub fn decode(latent: &LatentGrid, spec: &CodecSpec) -> Result<LatentGrid, CodecError> {
    spec.validate()?;
    if latent.channels() != spec.latent_channels {
        return Err(CodecError::Channels {
            expected: spec.latent_channels,
            actual: latent.channels(),
        });
    }
    match spec.kind {
        CodecKind::Identity => Ok(latent.clone()),
        CodecKind::Pool4 => {
            let f = spec.spatial_factor;
            let (c, lh, lw) = latent.shape();
            let mut out = LatentGrid::zeros(c, lh * f, lw * f);
            for ch in 0..c {
                for y in 0..lh * f {
                    for x in 0..lw * f {
                        out.set(ch, y, x, latent.get(ch, y / f, x / f));
                    }
                }
            }
            Ok(out)
        }
    }
}

impl LatentCodec for CodecSpec {
    fn encode(&self, image: &LatentGrid) -> Result<LatentGrid, CodecError> {
        encode(image, self)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid, CodecError> {
        decode(latent, self)
    }

    fn spatial_factor(&self) -> usize {
        self.spatial_factor
    }

    fn latent_channels(&self) -> usize {
        self.latent_channels
    }
}
