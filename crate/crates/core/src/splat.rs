//! Z-buffered square point splatting: partial RGB renders and
//! camera-dependent normal maps from the same visibility pass.

use crate::error::{Error, Result};
use crate::geometry::{unproject_depth, Camera, DepthMap, OrientedPointCloud, Vec3};
use crate::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatSettings {
    /// Square footprint half-width plus one: radius 1 covers a single
    /// pixel, radius 2 a 3×3 block.
    pub radius: usize,
    pub background: [f64; 3],
}

impl Default for SplatSettings {
    fn default() -> Self {
        Self { radius: 1, background: [0.0; 3] }
    }
}

/// Nearest-point visibility per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct ZBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    /// Winning point index per pixel.
    pub winner: Vec<Option<usize>>,
}

impl ZBuffer {
    pub fn mask(&self) -> Vec<bool> {
        self.winner.iter().map(Option::is_some).collect()
    }

    pub fn covered(&self) -> usize {
        self.winner.iter().filter(|w| w.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialRender {
    pub rgb: RgbImage,
    pub mask: Vec<bool>,
    pub zbuffer: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraNormalMap {
    pub rgb: RgbImage,
    /// `n · d` of the winning point; 0 where nothing was splatted.
    pub orientation: Vec<f64>,
    pub mask: Vec<bool>,
}

/// `o = n · d` with `d` the unit vector from `point` toward the camera
/// center. `None` when the point sits on the center.
pub fn view_dot(normal: &Vec3, point: &Vec3, camera: &Camera) -> Option<f64> {
    let to_cam = camera.center() - point;
    let len = to_cam.norm();
    if !(len > 0.0) {
        return None;
    }
    Some(normal.dot(&(to_cam / len)).clamp(-1.0, 1.0))
}

/// Maps a unit normal from `[-1, 1]` to RGB `[0, 1]`.
pub fn encode_normal(n: &Vec3) -> [f64; 3] {
    [(n.x + 1.0) * 0.5, (n.y + 1.0) * 0.5, (n.z + 1.0) * 0.5]
}

/// Depth test of every point against `camera`. Nearest depth wins; equal
/// depths keep the lower point index.
pub fn zbuffer(cloud: &OrientedPointCloud, camera: &Camera, radius: usize) -> Result<ZBuffer> {
    if radius == 0 {
        return Err(Error::contract("splat radius must be at least 1"));
    }
    let (w, h) = (camera.width, camera.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut winner = vec![None; w * h];
    let r = radius as i64 - 1;
    for (i, p) in cloud.positions.iter().enumerate() {
        let Some((u, z)) = camera.project(p) else { continue };
        if !u.x.is_finite() || !u.y.is_finite() {
            continue;
        }
        let (cx, cy) = (u.x.floor() as i64, u.y.floor() as i64);
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                let j = y as usize * w + x as usize;
                if z < depth[j] {
                    depth[j] = z;
                    winner[j] = Some(i);
                }
            }
        }
    }
    Ok(ZBuffer { width: w, height: h, depth, winner })
}

fn shade_partial(cloud: &OrientedPointCloud, zb: &ZBuffer, bg: [f64; 3]) -> PartialRender {
    let pixels = zb.winner.iter().map(|w| w.map_or(bg, |i| cloud.colors[i])).collect();
    PartialRender {
        rgb: RgbImage { width: zb.width, height: zb.height, pixels },
        mask: zb.mask(),
        zbuffer: zb.depth.clone(),
    }
}

fn shade_normals(cloud: &OrientedPointCloud, zb: &ZBuffer, camera: &Camera, bg: [f64; 3]) -> CameraNormalMap {
    let mut pixels = vec![bg; zb.winner.len()];
    let mut orientation = vec![0.0; zb.winner.len()];
    for (j, w) in zb.winner.iter().enumerate() {
        let Some(i) = *w else { continue };
        let n = cloud.normals[i];
        // Splatted points are strictly in front of the camera, so the
        // center never coincides with them.
        let o = view_dot(&n, &cloud.positions[i], camera).unwrap_or(0.0);
        orientation[j] = o;
        pixels[j] = if o < 0.0 { [0.0; 3] } else { encode_normal(&n) };
    }
    CameraNormalMap {
        rgb: RgbImage { width: zb.width, height: zb.height, pixels },
        orientation,
        mask: zb.mask(),
    }
}

pub fn render_partial(cloud: &OrientedPointCloud, camera: &Camera, settings: &SplatSettings) -> Result<PartialRender> {
    let zb = zbuffer(cloud, camera, settings.radius)?;
    Ok(shade_partial(cloud, &zb, settings.background))
}

pub fn render_camera_normal(
    cloud: &OrientedPointCloud,
    camera: &Camera,
    settings: &SplatSettings,
) -> Result<CameraNormalMap> {
    let zb = zbuffer(cloud, camera, settings.radius)?;
    Ok(shade_normals(cloud, &zb, camera, settings.background))
}

/// Both condition renders from one visibility pass.
pub fn render_conditions(
    cloud: &OrientedPointCloud,
    camera: &Camera,
    settings: &SplatSettings,
) -> Result<(PartialRender, CameraNormalMap)> {
    let zb = zbuffer(cloud, camera, settings.radius)?;
    Ok((shade_partial(cloud, &zb, settings.background), shade_normals(cloud, &zb, camera, settings.background)))
}

/// Unprojects `rgb`/`depth` from `src` and renders both conditions at `dst`.
pub fn warp(
    rgb: &RgbImage,
    depth: &DepthMap,
    src: &Camera,
    dst: &Camera,
    settings: &SplatSettings,
) -> Result<(PartialRender, CameraNormalMap)> {
    if rgb.width != src.width || rgb.height != src.height {
        return Err(Error::dim(format!(
            "image {}x{} vs source camera {}x{}",
            rgb.width, rgb.height, src.width, src.height
        )));
    }
    let cloud = unproject_depth(src, depth, rgb)?;
    render_conditions(&cloud, dst, settings)
}

/// Warps every frame of a reference video into `dst`, returning the
/// partial renders and camera-dependent normal maps frame by frame.
pub fn warp_video(
    frames: &[RgbImage],
    depths: &[DepthMap],
    src: &Camera,
    dst: &Camera,
    settings: &SplatSettings,
) -> Result<(Vec<RgbImage>, Vec<RgbImage>)> {
    if frames.len() != depths.len() {
        return Err(Error::dim(format!("{} frames vs {} depth maps", frames.len(), depths.len())));
    }
    let mut partial = Vec::with_capacity(frames.len());
    let mut normal = Vec::with_capacity(frames.len());
    for (rgb, depth) in frames.iter().zip(depths) {
        let (p, n) = warp(rgb, depth, src, dst, settings)?;
        partial.push(p.rgb);
        normal.push(n.rgb);
    }
    Ok((partial, normal))
}
