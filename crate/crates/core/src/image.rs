use crate::error::{Error, Result};

/// Linear RGB image with channels in `[0, 1]`, row-major, origin top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self { width, height, pixels: vec![color; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn same_size(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Interleaved `[h, w, 3]` values.
    pub fn to_interleaved(&self) -> Vec<f64> {
        self.pixels.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_interleaved(width: usize, height: usize, data: &[f64]) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dim(format!("{} values for a {width}x{height}x3 image", data.len())));
        }
        let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self { width, height, pixels })
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| [q(p[0]), q(p[1]), q(p[2])]).collect(),
        }
    }
}
