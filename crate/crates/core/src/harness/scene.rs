//! Analytic scenes: spheres, capsules, capped cylinders and boxes with
//! procedural textures and per-frame rigid motion.

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis along local y.
    Capsule { radius: f64, half_length: f64 },
    /// Capped; axis along local y.
    Cylinder { radius: f64, half_length: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    /// 3-D checkerboard in local coordinates.
    Checker { cell: f64 },
    /// Bands along local y.
    Stripes { period: f64 },
}

/// Two-color pattern with separate palettes for the local front (z < 0)
/// and back halves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub pattern: Pattern,
    pub front: [[f64; 3]; 2],
    pub back: [[f64; 3]; 2],
}

impl Texture {
    pub fn color_at(&self, local: &Vec3) -> [f64; 3] {
        let parity = match self.pattern {
            Pattern::Checker { cell } => {
                let c = |v: f64| (v / cell).floor() as i64;
                (c(local.x) + c(local.y) + c(local.z)).rem_euclid(2) as usize
            }
            Pattern::Stripes { period } => ((local.y / period).floor() as i64).rem_euclid(2) as usize,
        };
        if local.z < 0.0 {
            self.front[parity]
        } else {
            self.back[parity]
        }
    }
}

/// World-frame rigid map `x ↦ Q x + s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidMotion {
    /// Row-major 3×3.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self { rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], translation: [0.0; 3] }
    }

    /// Rotation by `angle` about `axis` through `pivot`.
    pub fn about_pivot(axis: Vec3, angle: f64, pivot: Vec3) -> Self {
        let q = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner();
        let s = pivot - q * pivot;
        Self { rotation: mat_to_rows(&q), translation: [s.x, s.y, s.z] }
    }

    pub fn rotation(&self) -> Mat3 {
        Mat3::from_row_slice(&self.rotation)
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from_row_slice(&self.translation)
    }
}

pub(crate) fn mat_to_rows(m: &Mat3) -> [f64; 9] {
    let mut a = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            a[i * 3 + j] = m[(i, j)];
        }
    }
    a
}

fn is_rotation(m: &Mat3) -> bool {
    (m.transpose() * m - Mat3::identity()).abs().max() <= 1e-9 && (m.determinant() - 1.0).abs() <= 1e-9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    /// Row-major local→world rotation.
    pub rotation: [f64; 9],
    pub texture: Texture,
    /// Frame `k` applies `motion[k % len]`; empty means static.
    #[serde(default)]
    pub motion: Vec<RigidMotion>,
}

/// Local→world pose `x_w = R x_l + c` at one frame.
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    pub r: Mat3,
    pub c: Vec3,
}

impl Pose {
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.r.transpose() * (p - self.c)
    }

    pub fn dir_to_local(&self, d: &Vec3) -> Vec3 {
        self.r.transpose() * d
    }

    pub fn dir_to_world(&self, d: &Vec3) -> Vec3 {
        self.r * d
    }
}

impl Primitive {
    pub fn new(shape: Shape, center: Vec3, texture: Texture) -> Self {
        Self {
            shape,
            center: [center.x, center.y, center.z],
            rotation: RigidMotion::identity().rotation,
            texture,
            motion: Vec::new(),
        }
    }

    pub fn pose(&self, frame: usize) -> Pose {
        let r = Mat3::from_row_slice(&self.rotation);
        let c = Vec3::from_row_slice(&self.center);
        match self.motion.get(frame % self.motion.len().max(1)) {
            Some(m) if !self.motion.is_empty() => {
                let q = m.rotation();
                Pose { r: q * r, c: q * c + m.translation() }
            }
            _ => Pose { r, c },
        }
    }

    /// Nearest hit `(t, local point, local outward normal)` of the local ray
    /// `o + t d` with `t > t_min`.
    pub fn intersect_local(&self, o: &Vec3, d: &Vec3, t_min: f64) -> Option<(f64, Vec3, Vec3)> {
        let mut best: Option<(f64, Vec3)> = None;
        let mut consider = |t: f64, n: Vec3| {
            if t > t_min && t.is_finite() && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, n));
            }
        };
        match self.shape {
            Shape::Sphere { radius } => {
                for t in sphere_hits(o, d, &Vec3::zeros(), radius) {
                    consider(t, (o + d * t) / radius);
                }
            }
            Shape::Capsule { radius, half_length } => {
                for t in cylinder_side_hits(o, d, radius) {
                    let p = o + d * t;
                    if p.y.abs() <= half_length {
                        consider(t, Vec3::new(p.x, 0.0, p.z) / radius);
                    }
                }
                for cy in [-half_length, half_length] {
                    let c = Vec3::new(0.0, cy, 0.0);
                    for t in sphere_hits(o, d, &c, radius) {
                        let p = o + d * t;
                        if (p.y - cy) * cy.signum() >= 0.0 || half_length == 0.0 {
                            consider(t, (p - c) / radius);
                        }
                    }
                }
            }
            Shape::Cylinder { radius, half_length } => {
                for t in cylinder_side_hits(o, d, radius) {
                    let p = o + d * t;
                    if p.y.abs() <= half_length {
                        consider(t, Vec3::new(p.x, 0.0, p.z) / radius);
                    }
                }
                if d.y != 0.0 {
                    for cy in [-half_length, half_length] {
                        let t = (cy - o.y) / d.y;
                        let p = o + d * t;
                        if p.x * p.x + p.z * p.z <= radius * radius {
                            consider(t, Vec3::new(0.0, cy.signum(), 0.0));
                        }
                    }
                }
            }
            Shape::Box { half_extents: b } => {
                for axis in 0..3 {
                    if d[axis] == 0.0 {
                        continue;
                    }
                    for side in [-1.0, 1.0] {
                        let t = (side * b[axis] - o[axis]) / d[axis];
                        let p = o + d * t;
                        let inside = (0..3).all(|a| a == axis || p[a].abs() <= b[a]);
                        if inside {
                            let mut n = Vec3::zeros();
                            n[axis] = side;
                            consider(t, n);
                        }
                    }
                }
            }
        }
        best.map(|(t, n)| (t, o + d * t, n))
    }

    /// Unsigned distance from a local point to the surface.
    pub fn surface_distance_local(&self, p: &Vec3) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => (p.norm() - radius).abs(),
            Shape::Capsule { radius, half_length } => {
                let y = p.y.clamp(-half_length, half_length);
                ((p - Vec3::new(0.0, y, 0.0)).norm() - radius).abs()
            }
            Shape::Cylinder { radius, half_length } => {
                let dx = (p.x * p.x + p.z * p.z).sqrt() - radius;
                let dy = p.y.abs() - half_length;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                (dx.max(dy).min(0.0) + outside).abs()
            }
            Shape::Box { half_extents: b } => {
                let q = Vec3::new(p.x.abs() - b[0], p.y.abs() - b[1], p.z.abs() - b[2]);
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                (outside + q.x.max(q.y).max(q.z).min(0.0)).abs()
            }
        }
    }
}

fn sphere_hits(o: &Vec3, d: &Vec3, c: &Vec3, r: f64) -> Vec<f64> {
    let oc = o - c;
    let a = d.dot(d);
    let b = oc.dot(d);
    let cc = oc.dot(&oc) - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    vec![(-b - s) / a, (-b + s) / a]
}

fn cylinder_side_hits(o: &Vec3, d: &Vec3, r: f64) -> Vec<f64> {
    let a = d.x * d.x + d.z * d.z;
    if a == 0.0 {
        return Vec::new();
    }
    let b = o.x * d.x + o.z * d.z;
    let c = o.x * o.x + o.z * o.z - r * r;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    vec![(-b - s) / a, (-b + s) / a]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescription {
    pub primitives: Vec<Primitive>,
}

/// Nearest ray-surface intersection in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    /// Outward unit normal, world frame.
    pub normal: Vec3,
    pub color: [f64; 3],
    pub primitive: usize,
}

impl SceneDescription {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            let finite = p.center.iter().chain(&p.rotation).all(|v| v.is_finite());
            let dims_ok = match p.shape {
                Shape::Sphere { radius } => radius > 0.0,
                Shape::Capsule { radius, half_length } | Shape::Cylinder { radius, half_length } => {
                    radius > 0.0 && half_length >= 0.0 && half_length.is_finite()
                }
                Shape::Box { half_extents } => half_extents.iter().all(|&b| b > 0.0 && b.is_finite()),
            };
            if !finite || !dims_ok {
                return Err(Error::Config(format!("primitive {i} has invalid dimensions or pose")));
            }
            if !is_rotation(&Mat3::from_row_slice(&p.rotation)) {
                return Err(Error::Config(format!("primitive {i} rotation is not rigid")));
            }
            if let Some(k) = p.motion.iter().position(|m| !is_rotation(&m.rotation())) {
                return Err(Error::Config(format!("primitive {i} motion {k} is not rigid")));
            }
        }
        Ok(())
    }

    pub fn cast(&self, origin: &Vec3, dir: &Vec3, frame: usize) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, prim) in self.primitives.iter().enumerate() {
            let pose = prim.pose(frame);
            let (o, d) = (pose.to_local(origin), pose.dir_to_local(dir));
            if let Some((t, local, n)) = prim.intersect_local(&o, &d, 1e-9) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        normal: pose.dir_to_world(&n).normalize(),
                        color: prim.texture.color_at(&local),
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    /// Distance from a world point to the nearest primitive surface.
    pub fn surface_distance(&self, p: &Vec3, frame: usize) -> f64 {
        self.primitives
            .iter()
            .map(|prim| prim.surface_distance_local(&prim.pose(frame).to_local(p)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Unit sphere at the origin with a checker texture.
    pub fn unit_sphere() -> Self {
        Self {
            primitives: vec![Primitive::new(
                Shape::Sphere { radius: 1.0 },
                Vec3::zeros(),
                checker(0.5, FRONT_A, BACK_A),
            )],
        }
    }

    /// Sphere resting on a horizontal capsule.
    pub fn sphere_and_capsule() -> Self {
        let mut capsule = Primitive::new(
            Shape::Capsule { radius: 0.35, half_length: 0.6 },
            Vec3::new(0.0, -0.75, 0.0),
            checker(0.4, FRONT_B, BACK_B),
        );
        capsule.rotation = mat_to_rows(
            &Rotation3::from_axis_angle(&Vec3::z_axis(), std::f64::consts::FRAC_PI_2).into_inner(),
        );
        Self {
            primitives: vec![
                Primitive::new(Shape::Sphere { radius: 0.6 }, Vec3::new(0.0, 0.25, 0.0), checker(0.45, FRONT_A, BACK_A)),
                capsule,
            ],
        }
    }
}

pub(crate) const FRONT_A: [[f64; 3]; 2] = [[200.0 / 255.0, 60.0 / 255.0, 40.0 / 255.0], [240.0 / 255.0, 200.0 / 255.0, 80.0 / 255.0]];
pub(crate) const BACK_A: [[f64; 3]; 2] = [[40.0 / 255.0, 80.0 / 255.0, 200.0 / 255.0], [90.0 / 255.0, 210.0 / 255.0, 230.0 / 255.0]];
pub(crate) const FRONT_B: [[f64; 3]; 2] = [[70.0 / 255.0, 170.0 / 255.0, 70.0 / 255.0], [230.0 / 255.0, 230.0 / 255.0, 230.0 / 255.0]];
pub(crate) const BACK_B: [[f64; 3]; 2] = [[120.0 / 255.0, 50.0 / 255.0, 150.0 / 255.0], [250.0 / 255.0, 140.0 / 255.0, 180.0 / 255.0]];

pub fn checker(cell: f64, front: [[f64; 3]; 2], back: [[f64; 3]; 2]) -> Texture {
    Texture { pattern: Pattern::Checker { cell }, front, back }
}
