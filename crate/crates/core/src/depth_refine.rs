//! Depth repair: least-squares scale/shift alignment of relative depth to
//! coarse metric depth, then descent on a normal-consistency energy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{diff_pair, Camera, DepthMap, NormalMap, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub alpha: f64,
    pub beta: f64,
    pub residual_rms: f64,
}

impl AffineFit {
    pub fn apply(&self, d: f64) -> f64 {
        self.alpha * d + self.beta
    }
}

/// Pixels valid in both maps and in `mask` when given.
fn joint_mask(a: &DepthMap, b: &DepthMap, mask: Option<&[bool]>) -> Result<Vec<usize>> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::dim(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    if let Some(m) = mask {
        if m.len() != a.len() {
            return Err(Error::dim(format!("mask of {} for {} pixels", m.len(), a.len())));
        }
    }
    Ok((0..a.len()).filter(|&i| a.is_valid(i) && b.is_valid(i) && mask.is_none_or(|m| m[i])).collect())
}

/// Closed-form minimizer of `‖α·relative + β − metric‖²` over the joint mask.
pub fn align_affine(relative: &DepthMap, metric: &DepthMap, mask: Option<&[bool]>) -> Result<AffineFit> {
    let idx = joint_mask(relative, metric, mask)?;
    fit_indexed(relative.values(), metric.values(), &idx)
}

/// [`align_affine`] on raw value slices. Relative depth carries no sign
/// constraint here, so zero and negative entries take part in the fit.
pub fn align_values(relative: &[f64], metric: &[f64], mask: Option<&[bool]>) -> Result<AffineFit> {
    if relative.len() != metric.len() || mask.is_some_and(|m| m.len() != relative.len()) {
        return Err(Error::dim(format!("{} relative vs {} metric values", relative.len(), metric.len())));
    }
    let idx: Vec<usize> = (0..relative.len()).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    fit_indexed(relative, metric, &idx)
}

fn fit_indexed(x: &[f64], y: &[f64], idx: &[usize]) -> Result<AffineFit> {
    let n = idx.len();
    if n < 2 {
        return Err(Error::InsufficientData { got: n, need: 2 });
    }
    if idx.iter().any(|&i| !x[i].is_finite() || !y[i].is_finite()) {
        return Err(Error::contract("non-finite depth in alignment"));
    }
    let nf = n as f64;
    let mx = idx.iter().map(|&i| x[i]).sum::<f64>() / nf;
    let my = idx.iter().map(|&i| y[i]).sum::<f64>() / nf;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &i in idx {
        let dx = x[i] - mx;
        sxx += dx * dx;
        sxy += dx * (y[i] - my);
    }
    if !(sxx > 1e-24 * nf * mx.abs().max(1.0).powi(2)) {
        return Err(Error::DegenerateFit);
    }
    let alpha = sxy / sxx;
    let beta = my - alpha * mx;
    let sse: f64 = idx.iter().map(|&i| (alpha * x[i] + beta - y[i]).powi(2)).sum();
    Ok(AffineFit { alpha, beta, residual_rms: (sse / nf).sqrt() })
}

/// `α·relative + β` on the relative mask; pixels mapped to non-positive
/// depth become invalid.
pub fn apply_affine(relative: &DepthMap, fit: &AffineFit) -> DepthMap {
    let mut values = vec![f64::INFINITY; relative.len()];
    let mut mask = vec![false; relative.len()];
    for i in 0..relative.len() {
        if relative.is_valid(i) {
            let d = fit.apply(relative.value(i));
            if d.is_finite() && d > 0.0 {
                values[i] = d;
                mask[i] = true;
            }
        }
    }
    DepthMap::with_mask(relative.width, relative.height, values, mask).expect("mask checked above")
}

/// Normal-consistency energy
/// `E(D) = Σ (1 − n(D)·ñ) + λ Σ (D − D_a)²`
/// where `n(D)` is the depth-derived normal and `ñ` the target normal.
pub struct NormalEnergy {
    rays: Vec<Vec3>,
    center: Vec3,
    anchor: Vec<f64>,
    valid: Vec<bool>,
    /// `(pixel, h+, h−, v+, v−, target)` for every normal term.
    terms: Vec<(usize, usize, usize, usize, usize, Vec3)>,
    lambda: f64,
}

impl NormalEnergy {
    pub fn new(aligned: &DepthMap, target: &NormalMap, camera: &Camera, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::contract(format!("lambda must be positive, got {lambda}")));
        }
        let (w, h) = (aligned.width, aligned.height);
        if target.width != w || target.height != h || !camera_fits(camera, w, h) {
            return Err(Error::dim(format!("depth {w}x{h} vs normals {}x{}", target.width, target.height)));
        }
        let valid = aligned.mask().to_vec();
        let mut rays = Vec::with_capacity(w * h);
        let mut terms = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                rays.push(camera.rotation().transpose() * (camera.k().try_inverse().expect("K invertible") * Vec3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0)));
                if !valid[i] || !target.valid[i] {
                    continue;
                }
                let nt = target.normals[i];
                if ((nt.norm() - 1.0).abs()) > 1e-6 {
                    return Err(Error::contract(format!("target normal at pixel {i} is not unit")));
                }
                if let (Some((hp, hm)), Some((vp, vm))) = (diff_pair(i, x, w, 1, &valid), diff_pair(i, y, h, w, &valid)) {
                    terms.push((i, hp, hm, vp, vm, nt));
                }
            }
        }
        Ok(Self { rays, center: camera.center(), anchor: aligned.values().to_vec(), valid, terms, lambda })
    }

    fn point(&self, d: &[f64], j: usize) -> Vec3 {
        self.center + self.rays[j] * d[j]
    }

    /// Energy and (optionally) its gradient with respect to every pixel.
    pub fn eval(&self, d: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let mut e = 0.0;
        for &(i, hp, hm, vp, vm, nt) in &self.terms {
            let a = self.point(d, hp) - self.point(d, hm);
            let b = self.point(d, vp) - self.point(d, vm);
            let m = a.cross(&b);
            let len = m.norm();
            if !(len > 0.0) {
                e += 1.0;
                continue;
            }
            let nh = m / len;
            let s = if nh.dot(&(self.center - self.point(d, i))) < 0.0 { -1.0 } else { 1.0 };
            e += 1.0 - s * nh.dot(&nt);
            if let Some(g) = grad.as_deref_mut() {
                // dE/dm for E = 1 − s·(m/|m|)·ñ.
                let c = -(nt - nh * nh.dot(&nt)) * (s / len);
                let ga = b.cross(&c);
                let gb = c.cross(&a);
                g[hp] += self.rays[hp].dot(&ga);
                g[hm] -= self.rays[hm].dot(&ga);
                g[vp] += self.rays[vp].dot(&gb);
                g[vm] -= self.rays[vm].dot(&gb);
            }
        }
        for i in 0..d.len() {
            if self.valid[i] {
                let r = d[i] - self.anchor[i];
                e += self.lambda * r * r;
                if let Some(g) = grad.as_deref_mut() {
                    g[i] += 2.0 * self.lambda * r;
                }
            }
        }
        e
    }
}

fn camera_fits(camera: &Camera, w: usize, h: usize) -> bool {
    camera.width == w && camera.height == h
}

#[derive(Clone, Debug)]
pub struct Refined {
    pub depth: DepthMap,
    /// Energy before the first step and after every accepted step.
    pub energies: Vec<f64>,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// Gradient descent with Barzilai-Borwein initial steps and Armijo
/// backtracking; stops early when no decreasing step is found.
pub fn refine_with_normals(
    aligned: &DepthMap,
    target: &NormalMap,
    camera: &Camera,
    lambda: f64,
    iters: usize,
) -> Result<Refined> {
    let energy = NormalEnergy::new(aligned, target, camera, lambda)?;
    let n = aligned.len();
    let mut d = aligned.values().to_vec();
    let mut g = vec![0.0; n];
    let mut e = energy.eval(&d, Some(&mut g));
    if !e.is_finite() {
        return Err(Error::Divergence { step: 0, reason: format!("initial energy {e}") });
    }
    let mut energies = vec![e];
    let mean_depth = (0..n).filter(|&i| aligned.is_valid(i)).map(|i| d[i]).sum::<f64>() / aligned.valid_count().max(1) as f64;
    let mut step = {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax > 0.0 { 0.01 * mean_depth / gmax } else { 0.0 }
    };
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    for it in 0..iters {
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg == 0.0 || step == 0.0 {
            break;
        }
        let mut accepted = None;
        let mut alpha = step;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                trial[i] = if aligned.is_valid(i) { d[i] - alpha * g[i] } else { d[i] };
            }
            let positive = (0..n).all(|i| !aligned.is_valid(i) || trial[i] > 0.0);
            if positive {
                let et = energy.eval(&trial, None);
                if et.is_finite() && et <= e - ARMIJO_C * alpha * gg {
                    accepted = Some(et);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(e_new) = accepted else { break };
        let e_check = energy.eval(&trial, Some(&mut g_new));
        if !e_check.is_finite() {
            return Err(Error::Divergence { step: it + 1, reason: format!("energy {e_check}") });
        }
        debug_assert_eq!(e_check, e_new);
        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..n {
            let s = trial[i] - d[i];
            ss += s * s;
            sy += s * (g_new[i] - g[i]);
        }
        step = if sy > 0.0 && (ss / sy).is_finite() { ss / sy } else { 2.0 * alpha };
        std::mem::swap(&mut d, &mut trial);
        std::mem::swap(&mut g, &mut g_new);
        e = e_new;
        energies.push(e);
    }
    Ok(Refined { depth: aligned.with_values(d)?, energies })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineParams {
    pub lambda: f64,
    pub iters: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self { lambda: 0.1, iters: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub fit: AffineFit,
    pub aligned: DepthMap,
    pub refined: DepthMap,
    pub energies: Vec<f64>,
}

/// Alignment followed by normal-guided refinement.
pub fn refine_pipeline(
    relative: &DepthMap,
    metric: &DepthMap,
    normals: &NormalMap,
    camera: &Camera,
    params: &RefineParams,
) -> Result<PipelineOutput> {
    let fit = align_affine(relative, metric, None)?;
    let aligned = apply_affine(relative, &fit);
    let r = refine_with_normals(&aligned, normals, camera, params.lambda, params.iters)?;
    Ok(PipelineOutput { fit, aligned, refined: r.depth, energies: r.energies })
}

/// Root-mean-square difference over pixels valid in both maps.
pub fn depth_rmse(a: &DepthMap, b: &DepthMap) -> f64 {
    let idx: Vec<usize> = (0..a.len().min(b.len())).filter(|&i| a.is_valid(i) && b.is_valid(i)).collect();
    if idx.is_empty() {
        return 0.0;
    }
    (idx.iter().map(|&i| (a.value(i) - b.value(i)).powi(2)).sum::<f64>() / idx.len() as f64).sqrt()
}
