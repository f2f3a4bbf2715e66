//! Controlled corruption of ground-truth depth, standing in for monocular
//! estimators: smooth bias, noise, and edge floaters for metric depth, and
//! a hidden affine map for relative depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::DepthMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeParams {
    /// Peak relative amplitude of the low-frequency multiplicative bias.
    pub bias_amplitude: f64,
    /// Relative standard deviation of per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Probability that a pixel near the silhouette becomes a floater.
    pub floater_prob: f64,
    /// Chebyshev distance (px) from the background defining the edge band.
    pub floater_band: usize,
    /// Relative range a floater is pushed back by.
    pub floater_push: [f64; 2],
    /// Fixed `(a, b)` for the relative depth; random when absent.
    pub relative_affine: Option<[f64; 2]>,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            bias_amplitude: 0.02,
            noise_sigma: 0.002,
            floater_prob: 0.3,
            floater_band: 2,
            floater_push: [0.05, 0.3],
            relative_affine: None,
        }
    }
}

impl DegradeParams {
    pub fn clean() -> Self {
        Self { bias_amplitude: 0.0, noise_sigma: 0.0, floater_prob: 0.0, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct DegradedDepth {
    pub coarse_metric: DepthMap,
    pub relative: DepthMap,
    /// Hidden map `relative = a * gt + b`.
    pub a: f64,
    pub b: f64,
}

/// Sum of three random plane waves scaled to peak magnitude 1 on the grid.
pub fn bias_field(width: usize, height: usize, rng: &mut impl Rng) -> Vec<f64> {
    let span = width.max(height) as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let wavelength = rng.random_range(0.5 * span..2.0 * span);
            let k = std::f64::consts::TAU / wavelength;
            (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
        })
        .collect();
    let mut field: Vec<f64> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            waves.iter().map(|&(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).sin()).sum()
        })
        .collect();
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v /= peak);
    }
    field
}

/// Valid pixels within `band` (Chebyshev) of an invalid pixel or the border.
pub fn edge_band(depth: &DepthMap, band: usize) -> Vec<bool> {
    let (w, h) = (depth.width, depth.height);
    let b = band as isize;
    (0..w * h)
        .map(|i| {
            if !depth.is_valid(i) {
                return false;
            }
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            (-b..=b).any(|dy| {
                (-b..=b).any(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize || !depth.is_valid(ny as usize * w + nx as usize)
                })
            })
        })
        .collect()
}

pub fn degrade_depth(gt: &DepthMap, params: &DegradeParams, seed: u64) -> Result<DegradedDepth> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = bias_field(gt.width, gt.height, &mut rng);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let band = edge_band(gt, params.floater_band);
    let mut coarse = gt.values().to_vec();
    for (i, c) in coarse.iter_mut().enumerate() {
        // Draw for every pixel so the stream does not depend on the mask.
        let z: f64 = normal.sample(&mut rng);
        let u: f64 = rng.random();
        let push = rng.random_range(params.floater_push[0]..=params.floater_push[1]);
        if !gt.is_valid(i) {
            continue;
        }
        let d = gt.value(i);
        if params.bias_amplitude != 0.0 || params.noise_sigma != 0.0 {
            *c = d * (1.0 + params.bias_amplitude * field[i]) + params.noise_sigma * d * z;
        }
        if band[i] && u < params.floater_prob {
            *c *= 1.0 + push;
        }
    }
    let [a, b] = match params.relative_affine {
        Some(ab) => ab,
        None => [rng.random_range(0.3..1.5), rng.random_range(0.5..2.0)],
    };
    let relative: Vec<f64> = gt.values().iter().enumerate().map(|(i, &d)| if gt.is_valid(i) { a * d + b } else { d }).collect();
    Ok(DegradedDepth { coarse_metric: gt.with_values(coarse)?, relative: gt.with_values(relative)?, a, b })
}
