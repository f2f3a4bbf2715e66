//! Built-in smoke suite: the small closed-form examples every module must
//! reproduce exactly, runnable from the shipped binary.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{
    assemble_conditions, generate::sample_latents, latent_shape, toy_decode, toy_encode, train_stage, Branches, Denoiser,
    DenoiserConfig, MultiViewCond, Stage, TrainConfig, TrainSample, is_sync_param,
};
use crate::depth_refine::{align_affine, align_values, refine_pipeline, refine_with_normals, RefineParams};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, interpolate, sample_euler, FlowSample, SamplerConfig, VelocityField};
use crate::geometry::{normals_from_depth, Camera, DepthMap, Mat3, OrientedPointCloud, Vec2, Vec3};
use crate::grad::{attention, layer_norm, ParamStore, PatchEmbed, Tape, Tensor, Var};
use crate::harness::{
    cast_pixel, degrade_depth, emit_dataset, make_rig, raycast, DatasetSpec, DegradeParams, RigSpec, SceneDescription,
};
use crate::image::RgbImage;
use crate::metrics::{cross_view_consistency, psnr, ssim};
use crate::splat::{render_camera_normal, render_partial, view_dot, warp, SplatSettings};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Outcome {
    if ok { Ok(()) } else { Err(msg()) }
}

fn near(a: f64, b: f64, tol: f64, what: &str) -> Outcome {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b}"))
}

fn err(e: Error) -> String {
    e.to_string()
}

/// Runs every example; the suite passes when every returned check does.
pub fn run() -> Vec<Check> {
    let cases: Vec<(&'static str, fn() -> Outcome)> = vec![
        ("attention: single token", attention_single),
        ("attention: equal keys average values", attention_equal_keys),
        ("backward: x*x", backward_square),
        ("backward: sum(A x)", backward_linear),
        ("layer norm: constant row", layer_norm_constant),
        ("layer norm: standardized row", layer_norm_standard),
        ("patch embed: one token, zero input", patch_embed),
        ("project: identity camera", project_identity),
        ("project: focal 2", project_focal),
        ("unproject: direct", unproject_direct),
        ("unproject: shifted center", unproject_shifted),
        ("normals: fronto-parallel plane", normals_fronto),
        ("normals: 45 degree plane", normals_inclined),
        ("view dot: facing and grazing", view_dot_cases),
        ("splat: single point", splat_single),
        ("splat: z-test", splat_ztest),
        ("normal map: color mapping", normal_color),
        ("warp: identity", warp_identity),
        ("align: exact affine", align_exact),
        ("align: identity", align_identity),
        ("refine: fixed point", refine_fixed_point),
        ("refine: large lambda pins depth", refine_pinned),
        ("refine: noiseless pipeline", refine_noiseless),
        ("refine: degenerate input aborts", refine_degenerate),
        ("interpolant: endpoints and midpoint", interpolant),
        ("fm loss: oracle and zero model", fm_losses),
        ("sampler: constant and zero fields", sampler_fields),
        ("codec: shape law", codec_shapes),
        ("codec: round trip and zeros", codec_round_trip),
        ("ref attention: fresh identity, single token", ref_block),
        ("sync attention: fresh identity, identical views", sync_block),
        ("conditions: black and partial-only", conditions),
        ("denoiser: fresh independence and equivariance", denoiser_invariants),
        ("training: stage 2 freezes non-sync params", stage_two_freeze),
        ("sampling: iterates and is deterministic", sampling),
        ("raycast: sphere center ray", raycast_sphere),
        ("rig: ring geometry", rig_ring),
        ("degrade: clean settings and hidden affine", degrade),
        ("dataset: layout and determinism", dataset_layout),
        ("psnr: identity and 1-level MSE", psnr_cases),
        ("ssim: identity and symmetry", ssim_cases),
        ("consistency: ordering and single view", consistency_cases),
    ];
    cases
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = match std::panic::catch_unwind(f) {
                Ok(Ok(())) => (true, String::new()),
                Ok(Err(e)) => (false, e),
                Err(_) => (false, "panicked".into()),
            };
            Check { name, passed, detail }
        })
        .collect()
}

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn attention_single() -> Outcome {
    let mut tape = Tape::new();
    let q = tape.constant(mat(&[&[1.0]]));
    let out = attention(&mut tape, q, q, q, 1).map_err(err)?;
    ensure(tape.value(out).data() == [1.0], || format!("{:?}", tape.value(out)))
}

fn attention_equal_keys() -> Outcome {
    let mut tape = Tape::new();
    let q = tape.constant(mat(&[&[1.0]]));
    let k = tape.constant(mat(&[&[0.5], &[0.5]]));
    let v = tape.constant(mat(&[&[0.0], &[2.0]]));
    let out = attention(&mut tape, q, k, v, 1).map_err(err)?;
    near(tape.value(out).item(), 1.0, 1e-15, "output")
}

fn backward_square() -> Outcome {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    let y = tape.mul(x, x).map_err(err)?;
    let g = tape.backward(y).map_err(err)?;
    near(g.wrt(&tape, x).item(), 6.0, 0.0, "df/dx")
}

fn backward_linear() -> Outcome {
    let mut tape = Tape::new();
    let a = tape.constant(mat(&[&[1.0, 1.0], &[1.0, 1.0]]));
    let x = tape.var(mat(&[&[0.3], &[-2.0]]));
    let y = tape.matmul(a, x).map_err(err)?;
    let s = tape.sum(y);
    let g = tape.backward(s).map_err(err)?.wrt(&tape, x);
    ensure(g.data() == [2.0, 2.0], || format!("{:?}", g.data()))
}

fn layer_norm_constant() -> Outcome {
    let mut tape = Tape::new();
    let x = tape.constant(mat(&[&[1.0, 1.0, 1.0]]));
    let y = layer_norm(&mut tape, x, None, 1e-5).map_err(err)?;
    ensure(tape.value(y).data() == [0.0; 3], || format!("{:?}", tape.value(y).data()))
}

fn layer_norm_standard() -> Outcome {
    let mut tape = Tape::new();
    let x = tape.constant(mat(&[&[-1.0, 1.0]]));
    let y = layer_norm(&mut tape, x, None, 1e-5).map_err(err)?;
    let want = 1.0 / (1.0f64 + 1e-5).sqrt();
    near(tape.value(y).data()[0], -want, 1e-15, "y0")?;
    near(tape.value(y).data()[1], want, 1e-15, "y1")
}

fn patch_embed() -> Outcome {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pe = PatchEmbed::new(&mut store, "pe", 1, 4, 3, &mut rng).map_err(err)?;
    let id = pe.proj.bias;
    store.param_mut(id).tensor = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 4, 4, 1]));
    let y = pe.forward(&mut tape, &store, x).map_err(err)?;
    ensure(tape.shape(y) == [1, 3], || format!("shape {:?}", tape.shape(y)))?;
    ensure(tape.value(y).data() == [0.5, -1.0, 2.0], || format!("{:?}", tape.value(y).data()))
}

fn camera(k: Mat3, r: Mat3, t: Vec3) -> Camera {
    Camera::new(k, r, t, 8, 8).unwrap()
}

fn project_identity() -> Outcome {
    let c = camera(Mat3::identity(), Mat3::identity(), Vec3::zeros());
    let (u, d) = c.project(&Vec3::new(0.0, 0.0, 5.0)).ok_or("behind camera")?;
    ensure(u == Vec2::new(0.0, 0.0) && d == 5.0, || format!("{u:?} {d}"))
}

fn project_focal() -> Outcome {
    let c = camera(Camera::intrinsics(2.0, 2.0, 0.0, 0.0), Mat3::identity(), Vec3::zeros());
    let (u, _) = c.project(&Vec3::new(1.0, 0.0, 2.0)).ok_or("behind camera")?;
    ensure(u == Vec2::new(1.0, 0.0), || format!("{u:?}"))
}

fn unproject_direct() -> Outcome {
    let c = camera(Mat3::identity(), Mat3::identity(), Vec3::zeros());
    let x = c.unproject(&Vec2::new(2.0, 3.0), 4.0);
    ensure(x == Vec3::new(8.0, 12.0, 4.0), || format!("{x:?}"))
}

fn unproject_shifted() -> Outcome {
    let c = camera(Mat3::identity(), Mat3::identity(), Vec3::new(0.0, 0.0, -5.0));
    let x = c.unproject(&Vec2::new(0.0, 0.0), 5.0);
    ensure(x == Vec3::new(0.0, 0.0, 10.0), || format!("{x:?}"))
}

fn pinhole(size: usize) -> Camera {
    let f = size as f64;
    Camera::new(Camera::intrinsics(f, f, size as f64 / 2.0, size as f64 / 2.0), Mat3::identity(), Vec3::zeros(), size, size)
        .unwrap()
}

/// Plane with normal `n` through `(0, 0, z0)`, seen by a camera at the
/// origin; every pixel must hit it in front of the camera.
fn plane_depth(cam: &Camera, n: Vec3, z0: f64) -> DepthMap {
    let vals: Vec<f64> = (0..cam.height)
        .flat_map(|y| (0..cam.width).map(move |x| (x, y)))
        .map(|(x, y)| z0 * n.z / n.dot(&cam.ray_scaled(&Camera::pixel_center(x, y))))
        .collect();
    assert!(vals.iter().all(|&d| d > 0.0), "plane behind camera");
    DepthMap::new(cam.width, cam.height, vals).unwrap()
}

fn normals_fronto() -> Outcome {
    let cam = pinhole(8);
    let nm = normals_from_depth(&cam, &DepthMap::new(8, 8, vec![3.0; 64]).unwrap());
    let bad = (0..64).filter(|&i| !nm.valid[i] || (nm.normals[i] - Vec3::new(0.0, 0.0, -1.0)).norm() > 1e-12).count();
    ensure(bad == 0, || format!("{bad} pixels off (0,0,-1)"))
}

fn normals_inclined() -> Outcome {
    let cam = pinhole(16);
    let n = Vec3::new(1.0, 0.0, -1.0).normalize();
    let nm = normals_from_depth(&cam, &plane_depth(&cam, n, 3.0));
    ensure(nm.valid.iter().all(|&v| v), || "invalid normals on a full plane".into())?;
    let worst = nm.normals.iter().map(|m| m.dot(&n)).fold(1.0, f64::min);
    ensure(worst > 0.999, || format!("min dot {worst}"))
}

fn view_dot_cases() -> Outcome {
    let cam = camera(Mat3::identity(), Mat3::identity(), Vec3::zeros());
    let p = Vec3::new(0.0, 0.0, 5.0);
    near(view_dot(&Vec3::new(0.0, 0.0, -1.0), &p, &cam).ok_or("undefined")?, 1.0, 0.0, "facing")?;
    near(view_dot(&Vec3::new(1.0, 0.0, 0.0), &p, &cam).ok_or("undefined")?, 0.0, 0.0, "grazing")
}

fn cloud(points: &[(Vec3, [f64; 3], Vec3)]) -> OrientedPointCloud {
    OrientedPointCloud {
        positions: points.iter().map(|p| p.0).collect(),
        colors: points.iter().map(|p| p.1).collect(),
        normals: points.iter().map(|p| p.2).collect(),
        source_pixel: (0..points.len()).collect(),
    }
}

fn three_by_three() -> Camera {
    Camera::new(Camera::intrinsics(1.0, 1.0, 1.5, 1.5), Mat3::identity(), Vec3::zeros(), 3, 3).unwrap()
}

const RED: [f64; 3] = [1.0, 0.0, 0.0];
const BLUE: [f64; 3] = [0.0, 0.0, 1.0];

fn splat_single() -> Outcome {
    let c = cloud(&[(Vec3::new(0.0, 0.0, 2.0), RED, Vec3::new(0.0, 0.0, -1.0))]);
    let r = render_partial(&c, &three_by_three(), &SplatSettings::default()).map_err(err)?;
    for (i, p) in r.rgb.pixels.iter().enumerate() {
        let want = if i == 4 { RED } else { [0.0; 3] };
        ensure(*p == want, || format!("pixel {i}: {p:?}"))?;
    }
    Ok(())
}

fn splat_ztest() -> Outcome {
    let n = Vec3::new(0.0, 0.0, -1.0);
    let c = cloud(&[(Vec3::new(0.0, 0.0, 3.0), BLUE, n), (Vec3::new(0.0, 0.0, 2.0), RED, n)]);
    let r = render_partial(&c, &three_by_three(), &SplatSettings::default()).map_err(err)?;
    ensure(r.rgb.pixels[4] == RED, || format!("{:?}", r.rgb.pixels[4]))
}

fn normal_color() -> Outcome {
    // Camera at (0, 0, 5) looking down −z sees the +z normal head on.
    let flip = Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0));
    let cam = Camera::new(Camera::intrinsics(1.0, 1.0, 1.5, 1.5), flip, Vec3::new(0.0, 0.0, 5.0), 3, 3).unwrap();
    let c = cloud(&[(Vec3::zeros(), RED, Vec3::new(0.0, 0.0, 1.0))]);
    let r = render_camera_normal(&c, &cam, &SplatSettings::default()).map_err(err)?;
    ensure(r.rgb.pixels[4] == [0.5, 0.5, 1.0], || format!("{:?}", r.rgb.pixels[4]))
}

fn warp_identity() -> Outcome {
    let cam = pinhole(12);
    let n = Vec3::new(0.3, -0.2, -1.0).normalize();
    let depth = plane_depth(&cam, n, 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rgb = RgbImage::from_pixels(12, 12, (0..144).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
    let (p, _) = warp(&rgb, &depth, &cam, &cam, &SplatSettings::default()).map_err(err)?;
    let bad = (0..144).filter(|&i| depth.is_valid(i) && p.rgb.pixels[i] != rgb.pixels[i]).count();
    ensure(bad == 0, || format!("{bad} pixels differ"))
}

fn align_exact() -> Outcome {
    let f = align_values(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0], None).map_err(err)?;
    near(f.alpha, 2.0, 1e-12, "alpha")?;
    near(f.beta, 1.0, 1e-12, "beta")?;
    near(f.residual_rms, 0.0, 1e-12, "residual")
}

fn align_identity() -> Outcome {
    let d = [1.0, 2.5, 3.0, 7.0];
    let f = align_values(&d, &d, None).map_err(err)?;
    near(f.alpha, 1.0, 1e-12, "alpha")?;
    near(f.beta, 0.0, 1e-12, "beta")
}

fn refine_fixed_point() -> Outcome {
    let cam = pinhole(16);
    let n = Vec3::new(0.2, 0.1, -1.0).normalize();
    let d = plane_depth(&cam, n, 3.0);
    let r = refine_with_normals(&d, &normals_from_depth(&cam, &d), &cam, 0.1, 50).map_err(err)?;
    let worst = (0..d.len()).map(|i| (r.depth.value(i) - d.value(i)).abs()).fold(0.0, f64::max);
    ensure(worst < 1e-8, || format!("moved {worst}"))
}

fn refine_pinned() -> Outcome {
    let cam = pinhole(16);
    let d = plane_depth(&cam, Vec3::new(0.0, 0.0, -1.0), 3.0);
    let n = Vec3::new(0.5, 0.0, -1.0).normalize();
    let target = normals_from_depth(&cam, &plane_depth(&cam, n, 3.0));
    let r = refine_with_normals(&d, &target, &cam, 1e6, 50).map_err(err)?;
    let worst = (0..d.len()).map(|i| (r.depth.value(i) - d.value(i)).abs()).fold(0.0, f64::max);
    ensure(worst < 1e-4, || format!("moved {worst}"))
}

fn refine_noiseless() -> Outcome {
    let cam = pinhole(16);
    let n = Vec3::new(-0.2, 0.3, -1.0).normalize();
    let gt = plane_depth(&cam, n, 3.0);
    let rel = gt.with_values(gt.values().iter().map(|d| 0.5 * d + 2.0).collect()).map_err(err)?;
    let out = refine_pipeline(&rel, &gt, &normals_from_depth(&cam, &gt), &cam, &RefineParams::default()).map_err(err)?;
    let rmse = crate::depth_refine::depth_rmse(&out.refined, &gt);
    ensure(rmse < 1e-6, || format!("rmse {rmse}"))
}

fn refine_degenerate() -> Outcome {
    let cam = pinhole(8);
    let gt = plane_depth(&cam, Vec3::new(0.0, 0.0, -1.0), 3.0);
    let flat = DepthMap::new(8, 8, vec![1.0; 64]).unwrap();
    let r = refine_pipeline(&flat, &gt, &normals_from_depth(&cam, &gt), &cam, &RefineParams::default());
    ensure(matches!(r, Err(Error::DegenerateFit)), || format!("{:?}", r.map(|o| o.fit)))
}

fn interpolant() -> Outcome {
    let x0 = Tensor::zeros(vec![4]);
    let x1 = Tensor::full(vec![4], 1.0);
    ensure(interpolate(&x0, &x1, 0.0).map_err(err)? == x0, || "t = 0".into())?;
    ensure(interpolate(&x0, &x1, 1.0).map_err(err)? == x1, || "t = 1".into())?;
    ensure(interpolate(&x0, &x1, 0.5).map_err(err)? == Tensor::full(vec![4], 0.5), || "t = 0.5".into())
}

/// Velocity independent of state and time.
struct ConstField(Tensor);

impl VelocityField for ConstField {
    type Cond = ();

    fn velocity(&self, tape: &mut Tape, _x: Var, _cond: &(), _t: f64) -> Result<Var> {
        Ok(tape.constant(self.0.clone()))
    }
}

fn fm_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = FlowSample::draw(Tensor::randn(vec![3, 5], &mut rng), &mut rng).map_err(err)?;
    let mut tape = Tape::new();
    let l = fm_loss(&mut tape, &ConstField(s.target_v.clone()), &[(s, &())]).map_err(err)?;
    near(tape.value(l).item(), 0.0, 1e-12, "oracle loss")?;
    let s = FlowSample::new(Tensor::zeros(vec![7]), Tensor::full(vec![7], 1.0), 0.3).map_err(err)?;
    let l = fm_loss(&mut tape, &ConstField(Tensor::zeros(vec![7])), &[(s, &())]).map_err(err)?;
    near(tape.value(l).item(), 1.0, 1e-15, "zero-model loss")
}

fn sampler_fields() -> Outcome {
    let x0 = Tensor::new(vec![4], vec![0.5, -1.25, 3.0, 0.0]).unwrap();
    let x1 = Tensor::new(vec![4], vec![1.0, 2.0, -0.75, 0.125]).unwrap();
    let v = x1.sub(&x0).unwrap();
    let out = sample_euler(&ConstField(v), &x0, &(), &SamplerConfig::new(1).map_err(err)?).map_err(err)?;
    ensure(out == x1, || format!("{:?}", out.data()))?;
    let out = sample_euler(&ConstField(Tensor::zeros(vec![4])), &x0, &(), &SamplerConfig::new(5).map_err(err)?).map_err(err)?;
    ensure(out == x0, || format!("{:?}", out.data()))
}

fn codec_shapes() -> Outcome {
    for (input, want) in [((1, 8, 8), (1, 1, 1)), ((5, 16, 16), (2, 2, 2)), ((49, 480, 480), (13, 60, 60))] {
        let got = latent_shape(input.0, input.1, input.2).map_err(err)?;
        ensure(got == want, || format!("{input:?} -> {got:?}"))?;
    }
    Ok(())
}

fn codec_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = Tensor::randn(vec![5, 16, 16, 3], &mut rng);
    let back = toy_decode(&toy_encode(&v).map_err(err)?).map_err(err)?;
    ensure(back == v, || "round trip differs".into())?;
    let z = toy_encode(&Tensor::zeros(vec![5, 16, 16, 3])).map_err(err)?;
    ensure(z.data().iter().all(|&x| x == 0.0), || "zeros do not encode to zeros".into())
}

fn small_model() -> Denoiser {
    Denoiser::new(DenoiserConfig { depth: 1, dim: 8, heads: 2, patch: 1, mlp_ratio: 2, temporal_stride: 1, spatial_stride: 1, seed: 9 })
        .unwrap()
}

fn randomized(mut m: Denoiser, seed: u64) -> Denoiser {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.store.iter_mut() {
        p.tensor = Tensor::uniform(p.tensor.shape().to_vec(), -0.5, 0.5, &mut rng);
    }
    m
}

fn ref_block() -> Outcome {
    let m = small_model();
    let b = &m.blocks[0].reference;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(vec![4, 8], &mut rng);
    let mut tape = Tape::new();
    let (xv, rv) = (tape.constant(x.clone()), tape.constant(Tensor::randn(vec![3, 8], &mut rng)));
    let y = b.forward(&mut tape, &m.store, xv, rv, 2).map_err(err)?;
    ensure(*tape.value(y) == x, || "fresh ref block is not the identity".into())?;
    let one = tape.constant(Tensor::randn(vec![1, 8], &mut rng));
    let q = b.attn.q.forward(&mut tape, &m.store, xv).map_err(err)?;
    let k = b.attn.k.forward(&mut tape, &m.store, one).map_err(err)?;
    let v = b.attn.v.forward(&mut tape, &m.store, one).map_err(err)?;
    let a = attention(&mut tape, q, k, v, 2).map_err(err)?;
    let a = tape.value(a);
    ensure((1..4).all(|i| a.row(i) == a.row(0)), || "attention rows differ".into())
}

fn sync_block() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![4, 8], &mut rng)).collect();
    let m = small_model();
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = m.blocks[0].sync.forward(&mut tape, &m.store, &vars, 2, 2).map_err(err)?;
    ensure(out.iter().zip(&xs).all(|(&o, x)| tape.value(o) == x), || "fresh sync block is not the identity".into())?;
    let m = randomized(small_model(), 8);
    let same: Vec<Var> = (0..3).map(|_| tape.constant(xs[0].clone())).collect();
    let out = m.blocks[0].sync.forward(&mut tape, &m.store, &same, 2, 2).map_err(err)?;
    ensure(out.iter().all(|&o| tape.value(o) == tape.value(out[0])), || "identical views diverged".into())
}

fn conditions() -> Outcome {
    let codec = crate::denoiser::Codec::new(1, 2).map_err(err)?;
    let c = codec.channels();
    let black = vec![RgbImage::new(4, 4); 2];
    let z = assemble_conditions(&codec, &black, &black).map_err(err)?;
    ensure(z.data().iter().all(|&v| v == 0.0), || "black renders are not zero".into())?;
    let lit = vec![RgbImage::filled(4, 4, [0.2, 0.4, 0.6]); 2];
    let z = assemble_conditions(&codec, &lit, &black).map_err(err)?;
    let (p, n) = (z.slice_last(0, c).map_err(err)?, z.slice_last(c, c).map_err(err)?);
    ensure(p.data().iter().all(|&v| v != 0.0) && n.data().iter().all(|&v| v == 0.0), || "channel order".into())
}

fn random_input(m: &Denoiser, views: usize, rng: &mut ChaCha8Rng) -> (Tensor, MultiViewCond) {
    let c = m.config.channels();
    let x = Tensor::randn(vec![views, 1, 2, 2, c], rng);
    let cond = MultiViewCond {
        reference: Tensor::randn(vec![1, 2, 2, c], rng),
        conditions: (0..views).map(|_| Tensor::randn(vec![1, 2, 2, 2 * c], rng)).collect(),
    };
    (x, cond)
}

fn denoiser_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = small_model();
    let (x, cond) = random_input(&m, 2, &mut rng);
    let y = m.predict(&x, &cond, 0.5, Branches::ALL).map_err(err)?;
    let mut other = cond.clone();
    other.reference = Tensor::randn(vec![1, 2, 2, m.config.channels()], &mut rng);
    other.conditions[1] = other.conditions[1].scale(-3.0);
    let y2 = m.predict(&x, &other, 0.5, Branches::ALL).map_err(err)?;
    ensure(y.index_first(0).unwrap() == y2.index_first(0).unwrap(), || "view 0 depends on reference or view 1".into())?;

    let m = randomized(small_model(), 11);
    let y = m.predict(&x, &cond, 0.5, Branches::ALL).map_err(err)?;
    let swapped = Tensor::stack_first(&[x.index_first(1).unwrap(), x.index_first(0).unwrap()])
        .and_then(|t| t.reshape(x.shape().to_vec()))
        .map_err(err)?;
    let sc = MultiViewCond { reference: cond.reference.clone(), conditions: vec![cond.conditions[1].clone(), cond.conditions[0].clone()] };
    let ys = m.predict(&swapped, &sc, 0.5, Branches::ALL).map_err(err)?;
    let d = ys.index_first(0).unwrap().max_abs_diff(&y.index_first(1).unwrap())
        .max(ys.index_first(1).unwrap().max_abs_diff(&y.index_first(0).unwrap()));
    ensure(d < 1e-12, || format!("permutation error {d}"))
}

fn tiny_data(m: &Denoiser) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    (0..2)
        .map(|_| {
            let (x, cond) = random_input(m, 2, &mut rng);
            TrainSample { target: x, cond }
        })
        .collect()
}

fn stage_two_freeze() -> Outcome {
    let mut m = small_model();
    let data = tiny_data(&m);
    let cfg = TrainConfig { lr_start: 1e-3, lr_end: 1e-3, ..TrainConfig::default() };
    let before = m.store.records();
    train_stage(&mut m, &data, Stage::Two, 2, &cfg).map_err(err)?;
    let after = m.store.records();
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        ensure(is_sync_param(name) || a == b, || format!("{name} changed"))?;
    }
    ensure(before != after, || "sync params did not move".into())
}

fn sampling() -> Outcome {
    let m = randomized(small_model(), 13);
    let data = tiny_data(&m);
    let one = sample_latents(&m, &data[0].cond, 1, 5, Branches::ALL).map_err(err)?;
    let many = sample_latents(&m, &data[0].cond, 50, 5, Branches::ALL).map_err(err)?;
    let again = sample_latents(&m, &data[0].cond, 50, 5, Branches::ALL).map_err(err)?;
    ensure(one.max_abs_diff(&many) > 0.0, || "K = 1 equals K = 50".into())?;
    ensure(many == again, || "same seed differs".into())
}

fn raycast_sphere() -> Outcome {
    let flip = Mat3::identity();
    let cam = Camera::new(Camera::intrinsics(9.0, 9.0, 4.5, 4.5), flip, Vec3::new(0.0, 0.0, 3.0), 9, 9).map_err(err)?;
    let scene = SceneDescription::unit_sphere();
    let (d, hit) = cast_pixel(&scene, &cam, Camera::pixel_center(4, 4), 0).ok_or("center ray missed")?;
    near(d, 2.0, 1e-12, "depth")?;
    ensure((hit.normal - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12, || format!("normal {:?}", hit.normal))?;
    near(view_dot(&hit.normal, &hit.point, &cam).ok_or("undefined")?, 1.0, 1e-12, "view dot")
}

fn rig_ring() -> Outcome {
    let spec = RigSpec::ring(4, 3.0, 16);
    let cams = make_rig(&spec).map_err(err)?;
    for (i, c) in cams.iter().enumerate() {
        let az = (90.0 * i as f64).to_radians();
        let want = Vec3::new(3.0 * az.sin(), 0.0, -3.0 * az.cos());
        ensure((c.center() - want).norm() < 1e-9, || format!("camera {i} at {:?}", c.center()))?;
        let r = c.rotation();
        ensure((r * r.transpose() - Mat3::identity()).norm() < 1e-12, || format!("camera {i} rotation"))?;
        let (u, _) = c.project(&Vec3::zeros()).ok_or("target behind camera")?;
        ensure((u - Vec2::new(8.0, 8.0)).norm() < 1e-6, || format!("target at {u:?}"))?;
    }
    near(cams[0].optical_axis().dot(&cams[2].optical_axis()), -1.0, 1e-9, "opposed axes")
}

fn degrade() -> Outcome {
    let cams = make_rig(&RigSpec::ring(1, 3.0, 24)).map_err(err)?;
    let gt = raycast(&SceneDescription::unit_sphere(), &cams[0], 0).depth;
    let clean = degrade_depth(&gt, &DegradeParams::clean(), 1).map_err(err)?;
    ensure(clean.coarse_metric == gt, || "clean degradation changed depth".into())?;
    let p = DegradeParams { relative_affine: Some([0.5, 2.0]), ..DegradeParams::clean() };
    let d = degrade_depth(&gt, &p, 1).map_err(err)?;
    let f = align_affine(&d.relative, &gt, None).map_err(err)?;
    near(f.alpha, 2.0, 1e-9, "alpha")?;
    near(f.beta, -4.0, 1e-9, "beta")
}

fn dir_bytes(root: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn dataset_layout() -> Outcome {
    let base = std::env::temp_dir().join(format!("mvpf-selftest-{}", std::process::id()));
    let result = (|| {
        let spec = DatasetSpec { samples: 1, views: 2, frames: 5, size: 16, ..DatasetSpec::default() };
        let (a, b) = (base.join("a"), base.join("b"));
        emit_dataset(&spec, &a).map_err(err)?;
        emit_dataset(&spec, &b).map_err(err)?;
        let s = a.join("sample_000");
        for d in ["ref", "view_1", "view_2", "view_1/partial", "view_1/normal", "view_2/partial", "view_2/normal"] {
            ensure(s.join(d).is_dir(), || format!("missing {d}"))?;
        }
        ensure(s.join("cameras.json").is_file(), || "missing cameras.json".into())?;
        let subdirs = std::fs::read_dir(&s).map_err(|e| e.to_string())?.filter(|e| e.as_ref().is_ok_and(|e| e.path().is_dir())).count();
        ensure(subdirs == 3, || format!("{subdirs} view directories"))?;
        let (fa, fb) = (dir_bytes(&a).map_err(|e| e.to_string())?, dir_bytes(&b).map_err(|e| e.to_string())?);
        ensure(fa == fb, || "re-run differs".into())
    })();
    let _ = std::fs::remove_dir_all(&base);
    result
}

fn psnr_cases() -> Outcome {
    let a = RgbImage::filled(4, 4, [0.5; 3]);
    ensure(psnr(&a, &a, 1.0).map_err(err)? == f64::INFINITY, || "identical images are finite".into())?;
    let a = RgbImage::filled(4, 4, [100.0; 3]);
    let b = RgbImage::filled(4, 4, [101.0; 3]);
    near(psnr(&a, &b, 255.0).map_err(err)?, 48.1308, 1e-4, "psnr")
}

fn ssim_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut noise = || RgbImage::from_pixels(16, 16, (0..256).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap();
    let (a, b) = (noise(), noise());
    near(ssim(&a, &a).map_err(err)?, 1.0, 0.0, "ssim(a, a)")?;
    near(ssim(&a, &b).map_err(err)?, ssim(&b, &a).map_err(err)?, 1e-12, "symmetry")
}

fn consistency_cases() -> Outcome {
    let mut scene = SceneDescription::sphere_and_capsule();
    for p in &mut scene.primitives {
        p.texture.back = p.texture.front;
    }
    let mut spec = RigSpec::ring(3, 3.5, 32);
    spec.height = 0.5;
    let cams = make_rig(&spec).map_err(err)?;
    let gts: Vec<_> = cams.iter().map(|c| raycast(&scene, c, 0)).collect();
    let rgb: Vec<Vec<RgbImage>> = gts.iter().map(|g| vec![g.rgb.clone()]).collect();
    let depth: Vec<Vec<DepthMap>> = gts.iter().map(|g| vec![g.depth.clone()]).collect();
    let base = cross_view_consistency(&rgb, &depth, &cams).map_err(err)?.score.ok_or("no co-visible pixels")?;
    let mut alt = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for p in &mut alt.primitives {
        p.texture.back = [[rng.random(), rng.random(), rng.random()], [rng.random(), rng.random(), rng.random()]];
    }
    let mut rgb2 = rgb.clone();
    rgb2[1] = vec![raycast(&alt, &cams[1], 0).rgb];
    let worse = cross_view_consistency(&rgb2, &depth, &cams).map_err(err)?.score.ok_or("no co-visible pixels")?;
    ensure(worse > base, || format!("{worse} <= {base}"))?;
    let single = cross_view_consistency(&rgb[..1], &depth[..1], &cams[..1]).map_err(err)?;
    ensure(single.score.is_none(), || "single view produced a score".into())
}
