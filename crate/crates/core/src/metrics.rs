//! Image quality and cross-view consistency scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unproject_depth, Camera, DepthMap};
use crate::image::RgbImage;
use crate::splat::zbuffer;

fn check_same(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::dim(format!("{}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`; identical inputs give `+∞`.
pub fn psnr_values(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(format!("{} vs {} values", a.len(), b.len())));
    }
    if !(peak > 0.0) {
        return Err(Error::contract(format!("peak must be positive, got {peak}")));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr(a: &RgbImage, b: &RgbImage, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    psnr_values(&a.to_interleaved(), &b.to_interleaved(), peak)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..SSIM_WINDOW).map(|t| k[t] * x[y * w + ox + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(oy + t) * ow + ox]).sum();
        }
    }
    out
}

/// Mean local SSIM of one channel with an 11-tap Gaussian window (σ 1.5),
/// population statistics, `C1 = (0.01 L)²`, `C2 = (0.03 L)²`.
pub fn ssim_channel(a: &[f64], b: &[f64], width: usize, height: usize, data_range: f64) -> Result<f64> {
    if a.len() != width * height || b.len() != a.len() {
        return Err(Error::dim(format!("{} / {} values for {width}x{height}", a.len(), b.len())));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::dim(format!("{width}x{height} is smaller than the {SSIM_WINDOW}px window")));
    }
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, width, height, &k);
    let mu_b = filter_valid(b, width, height, &k);
    let aa = filter_valid(&prod(a, a), width, height, &k);
    let bb = filter_valid(&prod(b, b), width, height, &k);
    let ab = filter_valid(&prod(a, b), width, height, &k);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let n = mu_a.len() as f64;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n)
}

/// Channel-averaged SSIM for images in `[0, 1]`.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let mut s = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.pixels.iter().map(|p| p[c]).collect();
        let pb: Vec<f64> = b.pixels.iter().map(|p| p[c]).collect();
        s += ssim_channel(&pa, &pb, a.width, a.height, 1.0)?;
    }
    Ok(s / 3.0)
}

/// Relative depth tolerance of the visibility test.
pub const VISIBILITY_TOL: f64 = 0.02;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Mean over evaluated (pair, frame) combinations; absent when none.
    pub score: Option<f64>,
    pub evaluated: usize,
    /// `(source view, target view, frame)` without co-visible pixels.
    pub skipped: Vec<(usize, usize, usize)>,
}

/// Mean absolute RGB difference between `src` warped into `dst` and `dst`
/// itself, over target pixels whose winning splat is unoccluded in the
/// target ground-truth depth. `None` when no pixel qualifies.
pub fn pair_consistency(
    src_rgb: &RgbImage,
    src_depth: &DepthMap,
    src_cam: &Camera,
    dst_rgb: &RgbImage,
    dst_depth: &DepthMap,
    dst_cam: &Camera,
) -> Result<Option<f64>> {
    check_same(src_rgb, &RgbImage::new(src_depth.width, src_depth.height))?;
    check_same(dst_rgb, &RgbImage::new(dst_depth.width, dst_depth.height))?;
    let cloud = unproject_depth(src_cam, src_depth, src_rgb)?;
    let zb = zbuffer(&cloud, dst_cam, 1)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (pix, win) in zb.winner.iter().enumerate() {
        let Some(p) = *win else { continue };
        let Some((u, z)) = dst_cam.project(&cloud.positions[p]) else { continue };
        let Some((x, y)) = dst_cam.pixel_of(&u) else { continue };
        let Some(d) = dst_depth.get(x, y) else { continue };
        if (z - d).abs() > VISIBILITY_TOL * d {
            continue;
        }
        let (a, b) = (cloud.colors[p], dst_rgb.pixels[pix]);
        sum += (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0;
        count += 1;
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Averages [`pair_consistency`] over ordered view pairs and frames.
/// `views[i][k]` is frame `k` of view `i`; `depths` is the matching
/// ground-truth geometry.
pub fn cross_view_consistency(views: &[Vec<RgbImage>], depths: &[Vec<DepthMap>], cameras: &[Camera]) -> Result<Consistency> {
    if views.len() != depths.len() || views.len() != cameras.len() {
        return Err(Error::dim(format!("{} views, {} depth stacks, {} cameras", views.len(), depths.len(), cameras.len())));
    }
    let mut out = Consistency::default();
    if views.len() < 2 {
        return Ok(out);
    }
    let frames = views[0].len();
    if views.iter().any(|v| v.len() != frames) || depths.iter().any(|d| d.len() != frames) {
        return Err(Error::dim("all views need the same frame count"));
    }
    let mut total = 0.0;
    for k in 0..frames {
        for i in 0..views.len() {
            for j in 0..views.len() {
                if i == j {
                    continue;
                }
                match pair_consistency(&views[i][k], &depths[i][k], &cameras[i], &views[j][k], &depths[j][k], &cameras[j])? {
                    Some(s) => {
                        total += s;
                        out.evaluated += 1;
                    }
                    None => out.skipped.push((i, j, k)),
                }
            }
        }
    }
    out.score = (out.evaluated > 0).then(|| total / out.evaluated as f64);
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewScores {
    pub view: usize,
    /// Mean over frames; `None` when every frame is identical to ground truth.
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub depth_rmse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewScores>,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub cross_view_consistency: Consistency,
}

/// Thresholds checked by [`EvalReport::check`]; absent entries are skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub min_psnr: Option<f64>,
    pub min_ssim: Option<f64>,
    pub max_consistency: Option<f64>,
}

impl EvalReport {
    /// Scores each generated view against ground truth (frames in [0, 1],
    /// PSNR peak 1).
    pub fn build(generated: &[Vec<RgbImage>], truth: &[Vec<RgbImage>], depths: &[Vec<DepthMap>], cameras: &[Camera]) -> Result<Self> {
        if generated.len() != truth.len() {
            return Err(Error::dim(format!("{} generated vs {} reference views", generated.len(), truth.len())));
        }
        let mut views = Vec::new();
        for (i, (g, t)) in generated.iter().zip(truth).enumerate() {
            if g.len() != t.len() || g.is_empty() {
                return Err(Error::dim(format!("view {i}: {} vs {} frames", g.len(), t.len())));
            }
            let mut p = 0.0;
            let mut s = 0.0;
            let mut all_identical = true;
            for (a, b) in g.iter().zip(t) {
                let v = psnr(a, b, 1.0)?;
                if v.is_finite() {
                    p += v;
                    all_identical = false;
                }
                s += ssim(a, b)?;
            }
            let n = g.len() as f64;
            let finite_frames = g.iter().zip(t).filter(|(a, b)| a != b).count();
            views.push(ViewScores {
                view: i,
                psnr: (!all_identical).then(|| p / finite_frames as f64),
                ssim: s / n,
                depth_rmse: None,
            });
        }
        let finite: Vec<f64> = views.iter().filter_map(|v| v.psnr).collect();
        let mean_psnr = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / views.len().max(1) as f64;
        let cross = cross_view_consistency(generated, depths, cameras)?;
        Ok(Self { views, mean_psnr, mean_ssim, cross_view_consistency: cross })
    }

    /// Names of failed thresholds.
    pub fn check(&self, t: &Thresholds) -> Vec<String> {
        let mut failed = Vec::new();
        if let Some(min) = t.min_psnr {
            if self.mean_psnr.is_some_and(|p| p < min) {
                failed.push(format!("psnr {:.3} < {min}", self.mean_psnr.unwrap_or_default()));
            }
        }
        if let Some(min) = t.min_ssim {
            if self.mean_ssim < min {
                failed.push(format!("ssim {:.4} < {min}", self.mean_ssim));
            }
        }
        if let Some(max) = t.max_consistency {
            match self.cross_view_consistency.score {
                Some(s) if s > max => failed.push(format!("consistency {s:.5} > {max}")),
                None => failed.push("consistency undefined".into()),
                _ => {}
            }
        }
        failed
    }
}
