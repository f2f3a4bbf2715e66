//! Fixed invertible video codec obeying the latent shape law: the first
//! frame is coded alone, then groups of `temporal` frames; each latent
//! cell stacks a `temporal × spatial × spatial × 3` block in its channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codec {
    pub temporal: usize,
    pub spatial: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Self { temporal: 4, spatial: 8 }
    }
}

impl Codec {
    pub fn new(temporal: usize, spatial: usize) -> Result<Self> {
        if temporal == 0 || spatial == 0 {
            return Err(Error::Config("codec strides must be positive".into()));
        }
        Ok(Self { temporal, spatial })
    }

    /// Latent channel count; slots past the first frame of latent frame 0
    /// are zero.
    pub fn channels(&self) -> usize {
        self.temporal * self.spatial * self.spatial * 3
    }

    /// `(1 + (f − 1)/temporal, H/spatial, W/spatial)`.
    pub fn latent_shape(&self, f: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        if f == 0 || (f - 1) % self.temporal != 0 {
            return Err(Error::Config(format!("{f} frames: need 1 + {}k", self.temporal)));
        }
        if h == 0 || w == 0 || h % self.spatial != 0 || w % self.spatial != 0 {
            return Err(Error::Config(format!("{h}x{w} frames: need multiples of {}", self.spatial)));
        }
        Ok((1 + (f - 1) / self.temporal, h / self.spatial, w / self.spatial))
    }

    /// Source frame of slot `dt` in latent frame `j`, if any.
    fn source_frame(&self, j: usize, dt: usize) -> Option<usize> {
        match j {
            0 => (dt == 0).then_some(0),
            _ => Some(1 + (j - 1) * self.temporal + dt),
        }
    }

    /// `[f, H, W, 3]` → `[f', h, w, C]`.
    pub fn encode(&self, video: &Tensor) -> Result<Tensor> {
        let [f, hh, ww, 3] = *video.shape() else {
            return Err(Error::dim(format!("video must be [f, H, W, 3], got {:?}", video.shape())));
        };
        let (lf, lh, lw) = self.latent_shape(f, hh, ww)?;
        let (s, c) = (self.spatial, self.channels());
        let src = video.data();
        let mut out = vec![0.0; lf * lh * lw * c];
        for j in 0..lf {
            for dt in 0..self.temporal {
                let Some(fi) = self.source_frame(j, dt) else { continue };
                for y in 0..hh {
                    for x in 0..ww {
                        let (ly, dy, lx, dx) = (y / s, y % s, x / s, x % s);
                        let ch = ((dt * s + dy) * s + dx) * 3;
                        let o = ((j * lh + ly) * lw + lx) * c + ch;
                        let i = ((fi * hh + y) * ww + x) * 3;
                        out[o..o + 3].copy_from_slice(&src[i..i + 3]);
                    }
                }
            }
        }
        Tensor::new(vec![lf, lh, lw, c], out)
    }

    /// Exact inverse of [`Codec::encode`]; padding slots are ignored.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let [lf, lh, lw, c] = *latent.shape() else {
            return Err(Error::dim(format!("latent must be [f', h, w, C], got {:?}", latent.shape())));
        };
        if c != self.channels() || lf == 0 {
            return Err(Error::dim(format!("latent has {c} channels, codec uses {}", self.channels())));
        }
        let s = self.spatial;
        let (f, hh, ww) = (1 + (lf - 1) * self.temporal, lh * s, lw * s);
        let src = latent.data();
        let mut out = vec![0.0; f * hh * ww * 3];
        for j in 0..lf {
            for dt in 0..self.temporal {
                let Some(fi) = self.source_frame(j, dt) else { continue };
                for y in 0..hh {
                    for x in 0..ww {
                        let (ly, dy, lx, dx) = (y / s, y % s, x / s, x % s);
                        let ch = ((dt * s + dy) * s + dx) * 3;
                        let i = ((j * lh + ly) * lw + lx) * c + ch;
                        let o = ((fi * hh + y) * ww + x) * 3;
                        out[o..o + 3].copy_from_slice(&src[i..i + 3]);
                    }
                }
            }
        }
        Tensor::new(vec![f, hh, ww, 3], out)
    }
}

/// Latent grid for the default strides (temporal 4, spatial 8).
pub fn latent_shape(f: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
    Codec::default().latent_shape(f, h, w)
}

pub fn toy_encode(video: &Tensor) -> Result<Tensor> {
    Codec::default().encode(video)
}

pub fn toy_decode(latent: &Tensor) -> Result<Tensor> {
    Codec::default().decode(latent)
}
