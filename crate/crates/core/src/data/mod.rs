//! Images, synthetic scenes, file formats, metrics and previews.

pub mod io;
pub mod metrics;
pub mod synthetic;
pub mod viz;

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

/// Float RGB image, row-major HWC, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Shape(format!("{} bytes for a {height}x{width} RGB image", bytes.len())));
        }
        Ok(Self {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f32; 3] {
        let o = (i * self.width + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, i: usize, j: usize, c: [f32; 3]) {
        let o = (i * self.width + j) * 3;
        self.data[o..o + 3].copy_from_slice(&c);
    }

    /// Copy of the window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut out = Self::new(height, width);
        for i in 0..height {
            let src = ((top + i) * self.width + left) * 3;
            out.data[i * width * 3..(i + 1) * width * 3].copy_from_slice(&self.data[src..src + width * 3]);
        }
        out
    }
}

/// Stacks same-sized images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut chw = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            chw.extend((0..h * w).map(|p| img.data[p * 3 + c]));
        }
    }
    Ok(Tensor::from_vec(chw, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Crops a row-major `(H, W)` map.
pub fn crop_map<T: Copy>(map: &[T], width: usize, top: usize, left: usize, height: usize, out_w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(height * out_w);
    for i in 0..height {
        let s = (top + i) * width + left;
        out.extend_from_slice(&map[s..s + out_w]);
    }
    out
}

/// Extends a row-major `(H, W)` map to `(H2, W2)` by repeating `fill`.
pub fn pad_map<T: Copy>(map: &[T], height: usize, width: usize, h2: usize, w2: usize, fill: T) -> Vec<T> {
    let mut out = vec![fill; h2 * w2];
    for i in 0..height {
        out[i * w2..i * w2 + width].copy_from_slice(&map[i * width..(i + 1) * width]);
    }
    out
}
