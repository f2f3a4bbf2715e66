//! File formats: 8-bit RGB PNG, little-endian PFM, camera JSON.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraRecord, DepthMap, NormalMap, Vec3};
use crate::image::RgbImage;

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    writer.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Reads 8-bit gray, gray-alpha, RGB or RGBA; alpha is dropped.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("png too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: only 8-bit PNG is supported", path.display())));
    }
    let ch = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = buf[..w * h * ch]
        .chunks_exact(ch)
        .map(|p| {
            let g = |i: usize| f64::from(p[i]) / 255.0;
            if ch < 3 { [g(0); 3] } else { [g(0), g(1), g(2)] }
        })
        .collect();
    RgbImage::from_pixels(w, h, pixels)
}

fn write_pfm(path: &Path, tag: &str, width: usize, height: usize, channels: usize, value: impl Fn(usize, usize) -> f32) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{tag}\n{width} {height}\n-1.0\n")?;
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                out.write_all(&value(y * width + x, c).to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Returns `(width, height, channels, row-major top-down values)`.
fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut header = Vec::new();
    while header.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format(format!("{}: truncated PFM header", path.display())));
        }
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    let bad = |what: &str| Error::Format(format!("{}: bad PFM {what}", path.display()));
    let channels = match header[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("magic")),
    };
    let w: usize = header[1].parse().map_err(|_| bad("width"))?;
    let h: usize = header[2].parse().map_err(|_| bad("height"))?;
    let scale: f64 = header[3].parse().map_err(|_| bad("scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale"));
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let n = w * h * channels;
    if raw.len() != n * 4 {
        return Err(Error::Format(format!("{}: expected {} data bytes, found {}", path.display(), n * 4, raw.len())));
    }
    let little = scale < 0.0;
    let mut vals = vec![0f32; n];
    for (k, b) in raw.chunks_exact(4).enumerate() {
        let b = [b[0], b[1], b[2], b[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, rest) = (k / (w * channels), k % (w * channels));
        vals[(h - 1 - row) * w * channels + rest] = v;
    }
    Ok((w, h, channels, vals))
}

/// Invalid pixels are stored as 0.
pub fn write_depth_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_pfm(path, "Pf", depth.width, depth.height, 1, |i, _| if depth.is_valid(i) { depth.value(i) as f32 } else { 0.0 })
}

/// Valid where the stored value is finite and positive.
pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let (w, h, c, v) = read_pfm(path)?;
    if c != 1 {
        return Err(Error::Format(format!("{}: depth PFM must be single-channel", path.display())));
    }
    DepthMap::new(w, h, v.into_iter().map(f64::from).collect())
}

/// Invalid pixels are stored as the zero vector.
pub fn write_normals_pfm(path: &Path, normals: &NormalMap) -> Result<()> {
    write_pfm(path, "PF", normals.width, normals.height, 3, |i, c| {
        if normals.valid[i] { normals.normals[i][c] as f32 } else { 0.0 }
    })
}

/// Nonzero vectors are renormalized and marked valid.
pub fn read_normals_pfm(path: &Path) -> Result<NormalMap> {
    let (w, h, c, v) = read_pfm(path)?;
    if c != 3 {
        return Err(Error::Format(format!("{}: normal PFM must have three channels", path.display())));
    }
    let mut normals = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for p in v.chunks_exact(3) {
        let n = Vec3::new(f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
        let len = n.norm();
        let ok = len > 0.0 && len.is_finite();
        normals.push(if ok { n / len } else { Vec3::zeros() });
        valid.push(ok);
    }
    Ok(NormalMap { width: w, height: h, normals, valid })
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let recs: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    write_json(path, &recs)
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let recs: Vec<CameraRecord> = read_json(path)?;
    recs.iter().map(Camera::try_from).collect()
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless_on_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = RgbImage::from_pixels(3, 2, (0..6).map(|i| [i as f64 / 255.0, 1.0, 40.0 * i as f64 / 255.0]).collect()).unwrap();
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }

    #[test]
    fn depth_pfm_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = DepthMap::new(2, 2, vec![1.5, f64::INFINITY, 3.0, 4.25]).unwrap();
        write_depth_pfm(&p, &d).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        // Bottom row first.
        let body = &bytes[bytes.len() - 16..];
        assert_eq!(&body[..4], &3.0f32.to_le_bytes());
        assert_eq!(&body[12..], &0.0f32.to_le_bytes());
        let back = read_depth_pfm(&p).unwrap();
        assert_eq!(back.mask(), d.mask());
        assert_eq!(back.get(0, 0), Some(1.5));
        assert_eq!(back.get(1, 1), Some(4.25));
    }

    #[test]
    fn normals_pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.pfm");
        let n = NormalMap {
            width: 2,
            height: 1,
            normals: vec![Vec3::new(0.0, 0.0, -1.0), Vec3::zeros()],
            valid: vec![true, false],
        };
        write_normals_pfm(&p, &n).unwrap();
        assert_eq!(read_normals_pfm(&p).unwrap(), n);
    }

    #[test]
    fn malformed_pfm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        std::fs::write(&p, b"P6\n1 1\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_depth_pfm(&p), Err(Error::Format(_))));
        std::fs::write(&p, b"Pf\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_depth_pfm(&p), Err(Error::Format(_))));
    }

    #[test]
    fn cameras_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cams.json");
        let cams = crate::harness::make_rig(&crate::harness::RigSpec::ring(3, 2.5, 16)).unwrap();
        write_cameras(&p, &cams).unwrap();
        let back = read_cameras(&p).unwrap();
        for (a, b) in cams.iter().zip(&back) {
            assert_eq!(CameraRecord::from(a), CameraRecord::from(b));
        }
    }
}
