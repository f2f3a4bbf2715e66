//! Synthetic multi-view video samples and their on-disk layout:
//!
//! ```text
//! sample_000/
//!   cameras.json            index 0 is the reference camera
//!   ref/frame_0000.png      ref/depth_0000.pfm
//!   view_1/frame_0000.png   view_1/depth_0000.pfm
//!   view_1/partial/frame_0000.png
//!   view_1/normal/frame_0000.png
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::performer::performer;
use super::render::{make_rig, raycast, RigSpec};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap};
use crate::image::RgbImage;
use crate::io;
use crate::splat::{warp_video, SplatSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub samples: usize,
    /// Target views per sample, excluding the reference.
    pub views: usize,
    pub frames: usize,
    pub size: usize,
    pub radius: f64,
    pub height: f64,
    pub fov_deg: f64,
    pub splat_radius: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { samples: 50, views: 2, frames: 5, size: 16, radius: 3.0, height: 0.3, fov_deg: 45.0, splat_radius: 1, seed: 0 }
    }
}

impl DatasetSpec {
    /// Ring with the reference at azimuth 0 and targets evenly spaced.
    pub fn rig(&self) -> RigSpec {
        RigSpec {
            views: self.views + 1,
            radius: self.radius,
            height: self.height,
            target: [0.0; 3],
            image_width: self.size,
            image_height: self.size,
            fov_deg: self.fov_deg,
        }
    }

    fn scene_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(index as u64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViewData {
    pub frames: Vec<RgbImage>,
    pub depths: Vec<DepthMap>,
    /// Empty for the reference view.
    pub partial: Vec<RgbImage>,
    pub normal: Vec<RgbImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleData {
    pub cameras: Vec<Camera>,
    pub reference: ViewData,
    pub views: Vec<ViewData>,
}

/// Depth as stored on disk: single precision, zero where invalid.
fn storable(depth: &DepthMap) -> Result<DepthMap> {
    let values = (0..depth.len()).map(|i| if depth.is_valid(i) { f64::from(depth.value(i) as f32) } else { 0.0 }).collect();
    DepthMap::with_mask(depth.width, depth.height, values, depth.mask().to_vec())
}

/// Warp conditions computed exactly as a loader would from stored files.
pub fn conditions_from_reference(
    reference: &ViewData,
    src: &Camera,
    dst: &Camera,
    settings: &SplatSettings,
) -> Result<(Vec<RgbImage>, Vec<RgbImage>)> {
    let (p, n) = warp_video(&reference.frames, &reference.depths, src, dst, settings)?;
    Ok((p.iter().map(RgbImage::quantized).collect(), n.iter().map(RgbImage::quantized).collect()))
}

pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<SampleData> {
    if spec.views == 0 || spec.frames == 0 {
        return Err(Error::Config("dataset needs at least one target view and one frame".into()));
    }
    let scene = performer(spec.scene_seed(index), spec.frames);
    let cameras = make_rig(&spec.rig())?;
    let mut rendered = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let mut v = ViewData::default();
        for k in 0..spec.frames {
            let gt = raycast(&scene, cam, k);
            v.frames.push(gt.rgb.quantized());
            v.depths.push(storable(&gt.depth)?);
        }
        rendered.push(v);
    }
    let reference = rendered.remove(0);
    let settings = SplatSettings { radius: spec.splat_radius, ..SplatSettings::default() };
    for (v, cam) in rendered.iter_mut().zip(&cameras[1..]) {
        let (p, n) = conditions_from_reference(&reference, &cameras[0], cam, &settings)?;
        v.partial = p;
        v.normal = n;
    }
    Ok(SampleData { cameras, reference, views: rendered })
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:03}"))
}

fn frame_name(prefix: &str, k: usize, ext: &str) -> String {
    format!("{prefix}_{k:04}.{ext}")
}

fn write_view(dir: &Path, v: &ViewData) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, (f, d)) in v.frames.iter().zip(&v.depths).enumerate() {
        io::write_png(&dir.join(frame_name("frame", k, "png")), f)?;
        io::write_depth_pfm(&dir.join(frame_name("depth", k, "pfm")), d)?;
    }
    for (sub, imgs) in [("partial", &v.partial), ("normal", &v.normal)] {
        if imgs.is_empty() {
            continue;
        }
        fs::create_dir_all(dir.join(sub))?;
        for (k, img) in imgs.iter().enumerate() {
            io::write_png(&dir.join(sub).join(frame_name("frame", k, "png")), img)?;
        }
    }
    Ok(())
}

pub fn write_sample(dir: &Path, s: &SampleData) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_cameras(&dir.join("cameras.json"), &s.cameras)?;
    write_view(&dir.join("ref"), &s.reference)?;
    for (i, v) in s.views.iter().enumerate() {
        write_view(&dir.join(format!("view_{}", i + 1)), v)?;
    }
    Ok(())
}

fn count_frames(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while dir.join(frame_name("frame", n, "png")).exists() {
        n += 1;
    }
    if n == 0 {
        return Err(Error::Format(format!("{}: no frames", dir.display())));
    }
    Ok(n)
}

fn read_view(dir: &Path, conditions: bool) -> Result<ViewData> {
    let n = count_frames(dir)?;
    let mut v = ViewData::default();
    for k in 0..n {
        v.frames.push(io::read_png(&dir.join(frame_name("frame", k, "png")))?);
        v.depths.push(io::read_depth_pfm(&dir.join(frame_name("depth", k, "pfm")))?);
        if conditions {
            v.partial.push(io::read_png(&dir.join("partial").join(frame_name("frame", k, "png")))?);
            v.normal.push(io::read_png(&dir.join("normal").join(frame_name("frame", k, "png")))?);
        }
    }
    Ok(v)
}

pub fn read_sample(dir: &Path) -> Result<SampleData> {
    let cameras = io::read_cameras(&dir.join("cameras.json"))?;
    if cameras.len() < 2 {
        return Err(Error::Format(format!("{}: need a reference and at least one target camera", dir.display())));
    }
    let reference = read_view(&dir.join("ref"), false)?;
    let views = (1..cameras.len()).map(|i| read_view(&dir.join(format!("view_{i}")), true)).collect::<Result<_>>()?;
    Ok(SampleData { cameras, reference, views })
}

/// Writes `spec.samples` samples plus `dataset.json` under `root`.
pub fn emit_dataset(spec: &DatasetSpec, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    io::write_json(&root.join("dataset.json"), spec)?;
    for i in 0..spec.samples {
        write_sample(&sample_dir(root, i), &generate_sample(spec, i)?)?;
    }
    Ok(())
}

/// Every `sample_*` directory under `root`, in name order.
pub fn read_dataset(root: &Path) -> Result<Vec<SampleData>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("sample_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Training(format!("{}: empty dataset", root.display())));
    }
    dirs.iter().map(|d| read_sample(d)).collect()
}
