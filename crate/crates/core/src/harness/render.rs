//! Analytic ground-truth rendering and ring camera rigs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap, NormalMap, Vec3};
use crate::image::RgbImage;

use super::scene::SceneDescription;

/// Per-pixel ground truth. Background pixels are invalid in `depth` and
/// `normals` and black in `rgb`.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    /// World frame, outward.
    pub normals: NormalMap,
    pub primitive: Vec<Option<usize>>,
}

/// Depth (camera z) and hit along the ray through subpixel `u`.
pub fn cast_pixel(scene: &SceneDescription, cam: &Camera, u: crate::geometry::Vec2, frame: usize) -> Option<(f64, super::scene::Hit)> {
    let origin = cam.center();
    let dir = cam.ray_direction(&u);
    let hit = scene.cast(&origin, &dir, frame)?;
    let depth = cam.to_camera(&hit.point).z;
    Some((depth, hit))
}

pub fn raycast(scene: &SceneDescription, cam: &Camera, frame: usize) -> GroundTruth {
    let (w, h) = (cam.width, cam.height);
    let rows: Vec<Vec<Option<(f64, super::scene::Hit)>>> = (0..h)
        .into_par_iter()
        .map(|y| (0..w).map(|x| cast_pixel(scene, cam, Camera::pixel_center(x, y), frame)).collect())
        .collect();
    let mut rgb = RgbImage::new(w, h);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut normals = vec![Vec3::zeros(); w * h];
    let mut valid = vec![false; w * h];
    let mut primitive = vec![None; w * h];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, px) in row.into_iter().enumerate() {
            if let Some((d, hit)) = px {
                let i = y * w + x;
                rgb.set(x, y, hit.color);
                depth[i] = d;
                normals[i] = hit.normal;
                valid[i] = true;
                primitive[i] = Some(hit.primitive);
            }
        }
    }
    let depth = DepthMap::with_mask(w, h, depth, valid.clone()).expect("sizes agree by construction");
    GroundTruth { rgb, depth, normals: NormalMap { width: w, height: h, normals, valid }, primitive }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub views: usize,
    pub radius: f64,
    /// Camera elevation above the target.
    #[serde(default)]
    pub height: f64,
    #[serde(default)]
    pub target: [f64; 3],
    pub image_width: usize,
    pub image_height: usize,
    /// Horizontal field of view in degrees.
    pub fov_deg: f64,
}

impl RigSpec {
    pub fn ring(views: usize, radius: f64, size: usize) -> Self {
        Self { views, radius, height: 0.0, target: [0.0; 3], image_width: size, image_height: size, fov_deg: 45.0 }
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.image_width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }

    /// Center of the camera at `azimuth_deg`; azimuth 0 sits on −z.
    pub fn center_at(&self, azimuth_deg: f64) -> Vec3 {
        let th = azimuth_deg.to_radians();
        Vec3::from_row_slice(&self.target) + Vec3::new(self.radius * th.sin(), self.height, -self.radius * th.cos())
    }

    pub fn camera_at(&self, azimuth_deg: f64) -> Result<Camera> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("rig radius must be positive, got {}", self.radius)));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) || self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Config("rig image size and field of view must be positive".into()));
        }
        let f = self.focal();
        let k = Camera::intrinsics(f, f, 0.5 * self.image_width as f64, 0.5 * self.image_height as f64);
        Camera::look_at(
            self.center_at(azimuth_deg),
            Vec3::from_row_slice(&self.target),
            Vec3::new(0.0, 1.0, 0.0),
            k,
            self.image_width,
            self.image_height,
        )
    }
}

/// `spec.views` cameras evenly spaced in azimuth, starting at 0°.
pub fn make_rig(spec: &RigSpec) -> Result<Vec<Camera>> {
    if spec.views == 0 {
        return Err(Error::Config("rig needs at least one view".into()));
    }
    (0..spec.views).map(|i| spec.camera_at(360.0 * i as f64 / spec.views as f64)).collect()
}
