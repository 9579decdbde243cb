//! Disparity and image files.
//!
//! PFM: `Pf` (one channel) or `PF` (three, first is used), a negative scale
//! means little-endian, rows stored bottom-up. KITTI: 16-bit grey PNG holding
//! `disparity · 256`, zero marks an invalid pixel.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::config::DisparityFormat;
use crate::data::RgbImage;
use crate::{Error, Result};

/// Disparity map with an explicit validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Self {
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Self {
            height,
            width,
            values,
            valid,
        }
    }
}

fn format_err(format: &'static str, path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        format,
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        None
    } else {
        std::str::from_utf8(&bytes[start..*pos]).ok()
    }
}

pub fn read_pfm(path: &Path) -> Result<DisparityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |m: &str| format_err("pfm", path, m);
    let mut pos = 0;
    let channels = match next_token(&bytes, &mut pos) {
        Some("Pf") => 1,
        Some("PF") => 3,
        _ => return Err(err("missing Pf/PF magic")),
    };
    let mut num = |what: &str| -> Result<String> {
        next_token(&bytes, &mut pos)
            .map(str::to_string)
            .ok_or_else(|| err(&format!("missing {what}")))
    };
    let width: usize = num("width")?.parse().map_err(|_| err("bad width"))?;
    let height: usize = num("height")?.parse().map_err(|_| err("bad height"))?;
    let scale: f64 = num("scale")?.parse().map_err(|_| err("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(err("scale must be non-zero"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = width * height * channels * 4;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        err(&format!("raster holds {} bytes, {need} expected", bytes.len().saturating_sub(pos)))
    })?;
    let little = scale < 0.0;
    let mut values = vec![0f32; width * height];
    for row in 0..height {
        let dst = height - 1 - row;
        for j in 0..width {
            let o = ((row * width + j) * channels) * 4;
            let b = [raster[o], raster[o + 1], raster[o + 2], raster[o + 3]];
            values[dst * width + j] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Ok(DisparityMap::new(height, width, values))
}

/// Writes a single-channel little-endian PFM; invalid pixels become `inf`.
pub fn write_pfm(path: &Path, map: &DisparityMap) -> Result<()> {
    let mut out = Vec::with_capacity(map.values.len() * 4 + 32);
    write!(out, "Pf\n{} {}\n-1\n", map.width, map.height).map_err(|e| Error::io(path, e))?;
    for row in (0..map.height).rev() {
        for j in 0..map.width {
            let n = row * map.width + j;
            let v = if map.valid[n] { map.values[n] } else { f32::INFINITY };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_kitti_png16(path: &Path) -> Result<DisparityMap> {
    let img = image::open(path)?;
    let img = match img {
        DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(format_err(
                "kitti-png16",
                path,
                format!("expected a 16-bit grey image, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    let values = raw.iter().map(|&v| v as f32 / 256.0).collect();
    let valid = raw.iter().map(|&v| v != 0).collect();
    Ok(DisparityMap {
        height: h as usize,
        width: w as usize,
        values,
        valid,
    })
}

pub fn write_kitti_png16(path: &Path, map: &DisparityMap) -> Result<()> {
    let raw: Vec<u16> = map
        .values
        .iter()
        .zip(&map.valid)
        .map(|(&v, &ok)| {
            if ok && v.is_finite() {
                (v as f64 * 256.0).round().clamp(1.0, 65535.0) as u16
            } else {
                0
            }
        })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(map.width as u32, map.height as u32, raw)
        .ok_or_else(|| format_err("kitti-png16", path, "buffer size mismatch"))?;
    buf.save(path)?;
    Ok(())
}

pub fn read_disparity(path: &Path, format: DisparityFormat) -> Result<DisparityMap> {
    match format {
        DisparityFormat::Pfm => read_pfm(path),
        DisparityFormat::KittiPng16 => read_kitti_png16(path),
    }
}

pub fn write_disparity(path: &Path, map: &DisparityMap, format: DisparityFormat) -> Result<()> {
    match format {
        DisparityFormat::Pfm => write_pfm(path, map),
        DisparityFormat::KittiPng16 => write_kitti_png16(path, map),
    }
}

/// Guesses the format from the extension.
pub fn format_for(path: &Path) -> Option<DisparityFormat> {
    match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "pfm" => Some(DisparityFormat::Pfm),
        "png" => Some(DisparityFormat::KittiPng16),
        _ => None,
    }
}

/// Reads any 8- or 16-bit image as float RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    Ok(RgbImage {
        height: h as usize,
        width: w as usize,
        data: img.into_raw(),
    })
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_rgb8(path, img.height, img.width, raw)
}

pub fn write_rgb8(path: &Path, height: usize, width: usize, raw: Vec<u8>) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| format_err("png", path, "buffer size mismatch"))?;
    buf.save(path)?;
    Ok(())
}

/// Reads a segment-label map: 8/16-bit grey, or RGB packed as
/// `r + 256·g + 65536·b`.
pub fn read_segments(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageRgb8(c) => c
            .into_raw()
            .chunks(3)
            .map(|p| p[0] as u32 | (p[1] as u32) << 8 | (p[2] as u32) << 16)
            .collect(),
        other => {
            return Err(format_err(
                "segments",
                path,
                format!("unsupported segment map colour type {:?}", other.color()),
            ))
        }
    };
    Ok((h, w, labels))
}

pub fn write_segments(path: &Path, height: usize, width: usize, labels: &[u32]) -> Result<()> {
    if labels.iter().any(|&l| l > u16::MAX as u32) {
        return Err(format_err("segments", path, "label exceeds 16 bits"));
    }
    let raw: Vec<u16> = labels.iter().map(|&l| l as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| format_err("segments", path, "buffer size mismatch"))?;
    buf.save(path)?;
    Ok(())
}
