//! Inference: warp the reference video into each target camera, assemble
//! conditions, integrate the flow jointly over all views, decode.

use nalgebra::{Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{Branches, Denoiser, MultiViewCond};
use super::{assemble_conditions, decode_video, encode_video};
use crate::error::{Error, Result};
use crate::flow::{sample_euler, SamplerConfig};
use crate::geometry::{Camera, DepthMap};
use crate::grad::Tensor;
use crate::image::RgbImage;
use crate::splat::{warp_video, SplatSettings};

pub struct GenerateRequest<'a> {
    pub reference: &'a [RgbImage],
    /// Per-frame reference depth (refined where available).
    pub depths: &'a [DepthMap],
    pub reference_camera: &'a Camera,
    pub targets: &'a [Camera],
    pub steps: usize,
    pub seed: u64,
    pub splat: SplatSettings,
    pub branches: Branches,
}

/// `views` cameras orbiting the reference about the world y axis at
/// `360·i/(views + 1)` degrees, `i = 1..=views`, in the same direction as
/// the harness ring.
pub fn orbit_targets(reference: &Camera, views: usize) -> Result<Vec<Camera>> {
    (1..=views)
        .map(|i| {
            let q = Rotation3::from_axis_angle(&Vector3::y_axis(), -(360.0 * i as f64 / (views + 1) as f64).to_radians());
            // Rotating the world by Q moves the center to Q·C and keeps t.
            let r = reference.rotation() * q.matrix().transpose();
            Camera::new(*reference.k(), r, *reference.translation(), reference.width, reference.height)
        })
        .collect()
}

/// Conditioning for a request, as the model consumes it.
pub fn request_conditions(model: &Denoiser, req: &GenerateRequest<'_>) -> Result<MultiViewCond> {
    if req.targets.is_empty() {
        return Err(Error::Config("no target cameras".into()));
    }
    let codec = model.config.codec();
    let reference = encode_video(&codec, req.reference)?;
    let conditions = req
        .targets
        .iter()
        .map(|cam| {
            // Quantized like the stored training conditions.
            let (p, n) = warp_video(req.reference, req.depths, req.reference_camera, cam, &req.splat)?;
            let q = |v: Vec<RgbImage>| v.iter().map(RgbImage::quantized).collect::<Vec<_>>();
            assemble_conditions(&codec, &q(p), &q(n))
        })
        .collect::<Result<_>>()?;
    Ok(MultiViewCond { reference, conditions })
}

/// Samples the `[views, f', h, w, C]` latent stack for `cond`.
pub fn sample_latents(model: &Denoiser, cond: &MultiViewCond, steps: usize, seed: u64, branches: Branches) -> Result<Tensor> {
    let mut shape = vec![cond.conditions.len()];
    shape.extend_from_slice(cond.reference.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::randn(shape, &mut rng);
    sample_euler(&model.with_branches(branches), &x0, cond, &SamplerConfig::new(steps)?)
}

/// One video per target camera.
pub fn generate_multiview(model: &Denoiser, req: &GenerateRequest<'_>) -> Result<Vec<Vec<RgbImage>>> {
    let cond = request_conditions(model, req)?;
    let z = sample_latents(model, &cond, req.steps, req.seed, req.branches)?;
    let codec = model.config.codec();
    (0..req.targets.len()).map(|v| decode_video(&codec, &z.index_first(v)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{make_rig, RigSpec};

    #[test]
    fn orbit_matches_ring_rig() {
        let mut spec = RigSpec::ring(4, 3.0, 16);
        spec.height = 0.4;
        let rig = make_rig(&spec).unwrap();
        let orbit = orbit_targets(&rig[0], 3).unwrap();
        for (a, b) in orbit.iter().zip(&rig[1..]) {
            assert!((a.center() - b.center()).norm() < 1e-12);
            assert!((a.rotation() - b.rotation()).norm() < 1e-12);
        }
    }
}
