//! Articulated performer proxy: capsule limbs, sphere head, box torso,
//! with keyframed limb swings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Vec3;

use super::scene::{Pattern, Primitive, RigidMotion, SceneDescription, Shape, Texture};

fn palette(rng: &mut impl Rng) -> [[f64; 3]; 2] {
    // Colors on the 8-bit grid so PNG storage is lossless.
    let mut c = || [0, 1, 2].map(|_| f64::from(rng.random_range(20u8..=235)) / 255.0);
    [c(), c()]
}

fn texture(rng: &mut impl Rng) -> Texture {
    let pattern = if rng.random_bool(0.5) {
        Pattern::Checker { cell: rng.random_range(0.15..0.3) }
    } else {
        Pattern::Stripes { period: rng.random_range(0.12..0.25) }
    };
    Texture { pattern, front: palette(rng), back: palette(rng) }
}

/// Random performer with `frames` keyframes; the same seed yields the
/// same scene.
pub fn performer(seed: u64, frames: usize) -> SceneDescription {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = frames.max(1);
    let torso_w = rng.random_range(0.22..0.3);
    let torso = Primitive::new(
        Shape::Box { half_extents: [torso_w, 0.35, 0.15] },
        Vec3::new(0.0, 0.1, 0.0),
        texture(&mut rng),
    );
    let head = Primitive::new(Shape::Sphere { radius: rng.random_range(0.15..0.2) }, Vec3::new(0.0, 0.68, 0.0), texture(&mut rng));
    let mut prims = vec![torso, head];
    let limb_tex = texture(&mut rng);
    let leg_tex = texture(&mut rng);
    let amp = rng.random_range(0.2..0.6);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for side in [-1.0, 1.0] {
        let shoulder = Vec3::new(side * (torso_w + 0.1), 0.4, 0.0);
        let mut arm = Primitive::new(
            Shape::Capsule { radius: 0.08, half_length: 0.22 },
            shoulder - Vec3::new(0.0, 0.3, 0.0),
            limb_tex.clone(),
        );
        arm.motion = swing(frames, amp * side, phase, shoulder);
        let hip = Vec3::new(side * 0.13, -0.25, 0.0);
        let mut leg = Primitive::new(
            Shape::Capsule { radius: 0.1, half_length: 0.3 },
            hip - Vec3::new(0.0, 0.42, 0.0),
            leg_tex.clone(),
        );
        leg.motion = swing(frames, -0.5 * amp * side, phase, hip);
        prims.push(arm);
        prims.push(leg);
    }
    SceneDescription { primitives: prims }
}

fn swing(frames: usize, amp: f64, phase: f64, pivot: Vec3) -> Vec<RigidMotion> {
    (0..frames)
        .map(|k| {
            let a = amp * (std::f64::consts::TAU * k as f64 / frames as f64 + phase).sin();
            RigidMotion::about_pivot(Vec3::x(), a, pivot)
        })
        .collect()
}
