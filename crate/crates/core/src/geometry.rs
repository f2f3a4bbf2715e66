//! Pinhole cameras and the depth ↔ point-cloud machinery.
//!
//! Extrinsics map world to camera: `x_cam = R · x_world + t`. Camera axes
//! are x right, y down, z forward. Continuous pixel coordinates put the
//! center of pixel `(i, j)` at `(i + 0.5, j + 0.5)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    k: Mat3,
    k_inv: Mat3,
    r: Mat3,
    t: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, width: usize, height: usize) -> Result<Self> {
        let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
        if !(ortho <= 1e-9) || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "rotation not orthonormal with det +1 (|RᵀR - I| = {ortho:e}, det = {})",
                r.determinant()
            )));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::contract("intrinsics must be upper-triangular with K[2,2] = 1"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || !k.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("focal lengths must be positive and finite"));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("translation must be finite"));
        }
        let k_inv = k.try_inverse().ok_or_else(|| Error::contract("singular intrinsics"))?;
        Ok(Self { k, k_inv, r, t, width, height })
    }

    pub fn intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Mat3 {
        Mat3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction
    /// (image y points along `-up`).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, k: Mat3, width: usize, height: usize) -> Result<Self> {
        let z = target - eye;
        if z.norm() == 0.0 {
            return Err(Error::contract("eye coincides with target"));
        }
        let z = z.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::contract("view direction parallel to up"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        Self::new(k, r, t, width, height)
    }

    pub fn k(&self) -> &Mat3 {
        &self.k
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.r
    }

    pub fn translation(&self) -> &Vec3 {
        &self.t
    }

    /// `C = -Rᵀ t`.
    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }

    /// World-frame unit vector along the camera's +z axis.
    pub fn optical_axis(&self) -> Vec3 {
        self.r.row(2).transpose()
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.r * p + self.t
    }

    /// Continuous pixel position and camera-frame depth of a world point.
    /// `None` for points at or behind the image plane (culled).
    pub fn project(&self, p: &Vec3) -> Option<(Vec2, f64)> {
        let pc = self.to_camera(p);
        let z = pc.z;
        if !(z > 0.0) {
            return None;
        }
        let h = self.k * pc;
        Some((Vec2::new(h.x / h.z, h.y / h.z), z))
    }

    /// `X = Rᵀ (d · K⁻¹ ũ − t)`.
    pub fn unproject(&self, pixel: &Vec2, depth: f64) -> Vec3 {
        self.r.transpose() * (self.k_inv * Vec3::new(pixel.x, pixel.y, 1.0) * depth - self.t)
    }

    /// World-frame offset per unit camera depth along the pixel's ray:
    /// `X = C + d · ray_scaled(u)`.
    pub fn ray_scaled(&self, pixel: &Vec2) -> Vec3 {
        self.r.transpose() * (self.k_inv * Vec3::new(pixel.x, pixel.y, 1.0))
    }

    pub fn ray_direction(&self, pixel: &Vec2) -> Vec3 {
        self.ray_scaled(pixel).normalize()
    }

    pub fn pixel_center(x: usize, y: usize) -> Vec2 {
        Vec2::new(x as f64 + 0.5, y as f64 + 0.5)
    }

    /// Integer pixel containing a continuous position, if inside the image.
    pub fn pixel_of(&self, u: &Vec2) -> Option<(usize, usize)> {
        let (x, y) = (u.x.floor(), u.y.floor());
        if x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

/// JSON form: `K` and `R` as 9 row-major floats, `t` as 3 floats.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let rm = |m: &Mat3| {
            let mut a = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    a[i * 3 + j] = m[(i, j)];
                }
            }
            a
        };
        Self { k: rm(&c.k), r: rm(&c.r), t: [c.t.x, c.t.y, c.t.z], width: c.width, height: c.height }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = Error;

    fn try_from(rec: &CameraRecord) -> Result<Self> {
        Camera::new(
            Mat3::from_row_slice(&rec.k),
            Mat3::from_row_slice(&rec.r),
            Vec3::from_row_slice(&rec.t),
            rec.width,
            rec.height,
        )
    }
}

/// Per-pixel camera-z depth with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Pixels are valid exactly where the value is finite and positive.
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::dim(format!("{} depths for {width}x{height}", values.len())));
        }
        let valid = values.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        Ok(Self { width, height, values, valid })
    }

    pub fn with_mask(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || mask.len() != values.len() {
            return Err(Error::dim(format!(
                "{} depths / {} mask entries for {width}x{height}",
                values.len(),
                mask.len()
            )));
        }
        if let Some(i) = (0..values.len()).find(|&i| mask[i] && !(values[i].is_finite() && values[i] > 0.0)) {
            return Err(Error::contract(format!("valid depth at index {i} is {}", values[i])));
        }
        Ok(Self { width, height, values, valid: mask })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Same mask, new values; entries off the mask are ignored.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::with_mask(self.width, self.height, values, self.valid.clone())
    }

    pub fn same_size(&self, w: usize, h: usize) -> bool {
        self.width == w && self.height == h
    }
}

/// World-frame unit normals per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Vec3>,
    pub valid: Vec<bool>,
}

impl NormalMap {
    pub fn get(&self, x: usize, y: usize) -> Option<Vec3> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.normals[i])
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrientedPointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
    pub normals: Vec<Vec3>,
    /// Flat index `y * width + x` of the pixel each point came from.
    pub source_pixel: Vec<usize>,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// World positions of every pixel center (garbage where depth is invalid).
pub fn unproject_grid(camera: &Camera, depth: &DepthMap) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(depth.len());
    for y in 0..depth.height {
        for x in 0..depth.width {
            out.push(camera.unproject(&Camera::pixel_center(x, y), depth.values[y * depth.width + x]));
        }
    }
    out
}

/// Neighbor pair `(plus, minus)` used for the difference along one axis:
/// central when both neighbors are valid, one-sided otherwise.
pub(crate) fn diff_pair(
    i: usize,
    coord: usize,
    extent: usize,
    stride: usize,
    valid: &[bool],
) -> Option<(usize, usize)> {
    let plus = (coord + 1 < extent && valid[i + stride]).then_some(i + stride);
    let minus = (coord > 0 && valid[i - stride]).then(|| i - stride);
    match (plus, minus) {
        (Some(p), Some(m)) => Some((p, m)),
        (Some(p), None) => Some((p, i)),
        (None, Some(m)) => Some((i, m)),
        (None, None) => None,
    }
}

/// Normals from the cross product of horizontal and vertical differences of
/// unprojected positions, oriented toward the camera.
pub fn normals_from_depth(camera: &Camera, depth: &DepthMap) -> NormalMap {
    let (w, h) = (depth.width, depth.height);
    let pos = unproject_grid(camera, depth);
    let center = camera.center();
    let mut normals = vec![Vec3::zeros(); w * h];
    let mut valid = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !depth.valid[i] {
                continue;
            }
            let (Some((hp, hm)), Some((vp, vm))) =
                (diff_pair(i, x, w, 1, &depth.valid), diff_pair(i, y, h, w, &depth.valid))
            else {
                continue;
            };
            let n = (pos[hp] - pos[hm]).cross(&(pos[vp] - pos[vm]));
            let len = n.norm();
            if !(len > 0.0) || !len.is_finite() {
                continue;
            }
            let mut n = n / len;
            if n.dot(&(center - pos[i])) < 0.0 {
                n = -n;
            }
            normals[i] = n;
            valid[i] = true;
        }
    }
    NormalMap { width: w, height: h, normals, valid }
}

/// One colored, oriented point per valid depth pixel. Normals come from
/// [`normals_from_depth`]; pixels without a usable neighborhood get the unit
/// vector pointing back at the camera.
pub fn unproject_depth(camera: &Camera, depth: &DepthMap, rgb: &RgbImage) -> Result<OrientedPointCloud> {
    let normals = normals_from_depth(camera, depth);
    unproject_with_normals(camera, depth, rgb, &normals)
}

/// As [`unproject_depth`] with caller-supplied world-frame normals.
pub fn unproject_with_normals(
    camera: &Camera,
    depth: &DepthMap,
    rgb: &RgbImage,
    normals: &NormalMap,
) -> Result<OrientedPointCloud> {
    if rgb.width != depth.width || rgb.height != depth.height {
        return Err(Error::dim(format!(
            "rgb {}x{} vs depth {}x{}",
            rgb.width, rgb.height, depth.width, depth.height
        )));
    }
    if normals.width != depth.width || normals.height != depth.height {
        return Err(Error::dim(format!(
            "normals {}x{} vs depth {}x{}",
            normals.width, normals.height, depth.width, depth.height
        )));
    }
    let center = camera.center();
    let mut cloud = OrientedPointCloud::default();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let i = y * depth.width + x;
            if !depth.valid[i] {
                continue;
            }
            let p = camera.unproject(&Camera::pixel_center(x, y), depth.values[i]);
            let n = if normals.valid[i] { normals.normals[i] } else { (center - p).normalize() };
            cloud.positions.push(p);
            cloud.colors.push(rgb.pixels[i]);
            cloud.normals.push(n);
            cloud.source_pixel.push(i);
        }
    }
    Ok(cloud)
}
