//! Multi-view video denoiser: codec, model, two-stage training and
//! generation.

pub mod codec;
pub mod generate;
pub mod model;
pub mod train;

#[cfg(test)]
mod tests;

pub use codec::{latent_shape, toy_decode, toy_encode, Codec};
pub use generate::{generate_multiview, orbit_targets, GenerateRequest};
pub use model::{is_sync_param, Branches, Configured, Denoiser, DenoiserConfig, MultiViewCond, RefAttention, SyncAttention};
pub use train::{eval_loss, make_sample, sample_from_data, train_stage, train_two_stage, Stage, StageReport, TrainConfig, TrainSample};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::image::RgbImage;

/// Frames → `[f, H, W, 3]`.
pub fn video_tensor(frames: &[RgbImage]) -> Result<Tensor> {
    let first = frames.first().ok_or_else(|| Error::dim("empty video"))?;
    if let Some(bad) = frames.iter().find(|f| !f.same_size(first)) {
        return Err(Error::dim(format!("frame {}x{} vs {}x{}", bad.width, bad.height, first.width, first.height)));
    }
    let data: Vec<f64> = frames.iter().flat_map(|f| f.to_interleaved()).collect();
    Tensor::new(vec![frames.len(), first.height, first.width, 3], data)
}

/// `[f, H, W, 3]` → frames.
pub fn tensor_video(t: &Tensor) -> Result<Vec<RgbImage>> {
    let [f, h, w, 3] = *t.shape() else {
        return Err(Error::dim(format!("video must be [f, H, W, 3], got {:?}", t.shape())));
    };
    (0..f).map(|i| RgbImage::from_interleaved(w, h, &t.data()[i * h * w * 3..(i + 1) * h * w * 3])).collect()
}

/// Maps `[0, 1]` colors to `[-1, 1]`.
pub fn to_signed(t: &Tensor) -> Tensor {
    t.map(|v| 2.0 * v - 1.0)
}

/// Maps `[-1, 1]` back to `[0, 1]`, clamping.
pub fn from_signed(t: &Tensor) -> Tensor {
    t.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Latent of a clean video as the model sees it.
pub fn encode_video(codec: &Codec, frames: &[RgbImage]) -> Result<Tensor> {
    codec.encode(&to_signed(&video_tensor(frames)?))
}

pub fn decode_video(codec: &Codec, latent: &Tensor) -> Result<Vec<RgbImage>> {
    tensor_video(&from_signed(&codec.decode(latent)?))
}

/// Partial-render and normal latents concatenated on channels
/// (`[f', h, w, 2C]`, partial first). Renders are encoded unshifted, so
/// black encodes to zero.
pub fn assemble_conditions(codec: &Codec, partial: &[RgbImage], normal: &[RgbImage]) -> Result<Tensor> {
    if partial.len() != normal.len() {
        return Err(Error::dim(format!("{} partial vs {} normal frames", partial.len(), normal.len())));
    }
    let p = codec.encode(&video_tensor(partial)?)?;
    let n = codec.encode(&video_tensor(normal)?)?;
    if p.shape() != n.shape() {
        return Err(Error::dim(format!("partial latent {:?} vs normal latent {:?}", p.shape(), n.shape())));
    }
    Tensor::concat_last(&[&p, &n])
}
