//! Layered planar stereo scenes with exact ground truth.
//!
//! A scene is a stack of textured planes `d(x, y) = a + b·x + c·y`
//! parameterised in left-view coordinates, each with a support shape. At any
//! point the surface with the largest disparity (the closest) is visible. The
//! right view is rendered by inverting the plane equation per layer, so both
//! views see the same texture at corresponding points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{SyntheticConfig, Texture};
use crate::data::RgbImage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Everywhere,
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
    Ellipse { ci: f64, cj: f64, ri: f64, rj: f64 },
}

impl Shape {
    pub fn contains(&self, i: f64, j: f64) -> bool {
        match *self {
            Shape::Everywhere => true,
            Shape::Rect { top, left, bottom, right } => i >= top && i < bottom && j >= left && j < right,
            Shape::Ellipse { ci, cj, ri, rj } => ((i - ci) / ri).powi(2) + ((j - cj) / rj).powi(2) <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[a, b, c]` of `d = a + b·x + c·y`.
    pub plane: [f64; 3],
    pub shape: Shape,
    pub colour: [f32; 3],
    pub texture_seed: u64,
}

impl Layer {
    pub fn fronto(disparity: f64, shape: Shape, colour: [f32; 3], texture_seed: u64) -> Self {
        Self {
            plane: [disparity, 0.0, 0.0],
            shape,
            colour,
            texture_seed,
        }
    }

    pub fn disparity(&self, i: f64, x: f64) -> f64 {
        self.plane[0] + self.plane[1] * x + self.plane[2] * i
    }

    /// Left-view column whose point lands at right-view column `xr`.
    pub fn source_column(&self, i: f64, xr: f64) -> f64 {
        let [a, b, c] = self.plane;
        (xr + a + c * i) / (1.0 - b)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub left: RgbImage,
    pub right: RgbImage,
    pub disparity: Vec<f32>,
    pub valid: Vec<bool>,
    /// Visible layer of each left pixel.
    pub layer: Vec<u8>,
    pub seed: u64,
}

fn hash(seed: u64, x: i64, y: i64) -> f64 {
    let mut h = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinearly interpolated lattice noise in `[0, 1]`.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as i64, y0 as i64);
    let v00 = hash(seed, xi, yi);
    let v10 = hash(seed, xi + 1, yi);
    let v01 = hash(seed, xi, yi + 1);
    let v11 = hash(seed, xi + 1, yi + 1);
    let top = v00 * (1.0 - fx) + v10 * fx;
    let bottom = v01 * (1.0 - fx) + v11 * fx;
    top * (1.0 - fy) + bottom * fy
}

fn shade(layer: &Layer, texture: Texture, dot: f64, i: f64, x: f64) -> [f32; 3] {
    let s = match texture {
        Texture::Dots => {
            let fine = value_noise(layer.texture_seed, x / dot, i / dot);
            let coarse = value_noise(layer.texture_seed ^ 0xABCD, x / (4.0 * dot), i / (4.0 * dot));
            0.25 + 0.5 * fine + 0.25 * coarse
        }
        Texture::Gradients => {
            let u = (x * 0.05 + i * 0.03 + hash(layer.texture_seed, 0, 0) * 6.0).sin();
            0.6 + 0.3 * u
        }
    };
    let s = s as f32;
    [
        (layer.colour[0] * s).clamp(0.0, 1.0),
        (layer.colour[1] * s).clamp(0.0, 1.0),
        (layer.colour[2] * s).clamp(0.0, 1.0),
    ]
}

/// Visible layer at left-view point `(i, x)`.
fn visible_left(layers: &[Layer], i: f64, x: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (n, l) in layers.iter().enumerate() {
        if l.shape.contains(i, x) {
            let d = l.disparity(i, x);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((n, d));
            }
        }
    }
    best.map(|(n, _)| n)
}

/// Visible layer at right-view point `(i, xr)` and its source column.
fn visible_right(layers: &[Layer], i: f64, xr: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (n, l) in layers.iter().enumerate() {
        let xl = l.source_column(i, xr);
        if l.shape.contains(i, xl) {
            let d = l.disparity(i, xl);
            if best.is_none_or(|(_, bd, _)| d > bd) {
                best = Some((n, d, xl));
            }
        }
    }
    best.map(|(n, _, xl)| (n, xl))
}

/// Renders a layer stack. The first layer must cover the whole plane.
pub fn render(layers: &[Layer], height: usize, width: usize, texture: Texture, dot_size: f64, seed: u64) -> Result<SyntheticScene> {
    if layers.first().map(|l| l.shape) != Some(Shape::Everywhere) {
        return Err(Error::InvalidArgument("the first layer must be an unbounded background".into()));
    }
    if layers.iter().any(|l| l.plane[1] >= 1.0) {
        return Err(Error::InvalidArgument("horizontal disparity slope must be below 1".into()));
    }
    let mut left = RgbImage::new(height, width);
    let mut right = RgbImage::new(height, width);
    let mut disparity = vec![0f32; height * width];
    let mut valid = vec![false; height * width];
    let mut layer_id = vec![0u8; height * width];
    for i in 0..height {
        let fi = i as f64;
        for j in 0..width {
            let fj = j as f64;
            let n = visible_left(layers, fi, fj).unwrap();
            let d = layers[n].disparity(fi, fj);
            left.set(i, j, shade(&layers[n], texture, dot_size, fi, fj));
            disparity[i * width + j] = d as f32;
            layer_id[i * width + j] = n as u8;
            let xr = fj - d;
            valid[i * width + j] = xr >= 0.0
                && xr <= (width - 1) as f64
                && visible_right(layers, fi, xr).map(|(m, _)| m) == Some(n);

            let (m, xl) = visible_right(layers, fi, fj).unwrap();
            right.set(i, j, shade(&layers[m], texture, dot_size, fi, xl));
        }
    }
    Ok(SyntheticScene {
        left,
        right,
        disparity,
        valid,
        layer: layer_id,
        seed,
    })
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // Saturated, bright hues so neighbouring layers differ in colour.
    let h: f32 = rng.random_range(0.0..6.0);
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v: f32 = rng.random_range(0.7..1.0);
    let floor = 0.25;
    [
        (floor + (1.0 - floor) * r) * v,
        (floor + (1.0 - floor) * g) * v,
        (floor + (1.0 - floor) * b) * v,
    ]
}

/// Random plane whose disparity stays inside `[lo, hi]` over the image.
fn random_plane(rng: &mut ChaCha8Rng, lo: f64, hi: f64, cfg: &SyntheticConfig) -> [f64; 3] {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    if !cfg.slanted || hi - lo < 1.0 {
        let d = rng.random_range(lo..=hi);
        return [if cfg.integer_disparity { d.round() } else { d }, 0.0, 0.0];
    }
    let span = (hi - lo) * 0.5;
    let gx: f64 = rng.random_range(-span..=span);
    let gy: f64 = rng.random_range(-span..=span) * 0.5;
    let b = (gx / w).clamp(-0.15, 0.15);
    let c = gy / h;
    let min_at = b.min(0.0) * w + c.min(0.0) * h;
    let max_at = b.max(0.0) * w + c.max(0.0) * h;
    let a_lo = lo - min_at;
    let a_hi = hi - max_at;
    let a = if a_hi > a_lo { rng.random_range(a_lo..=a_hi) } else { (lo + hi) / 2.0 };
    [a, b, c]
}

/// Generates a random layered scene, deterministic in `seed`.
pub fn generate_synthetic_pair(cfg: &SyntheticConfig, max_disparity: usize, seed: u64) -> Result<SyntheticScene> {
    if cfg.max_disparity > max_disparity as f64 || cfg.min_disparity < 0.0 || cfg.min_disparity > cfg.max_disparity {
        return Err(Error::InvalidArgument(format!(
            "disparity range [{}, {}] is not inside [0, {max_disparity}]",
            cfg.min_disparity, cfg.max_disparity
        )));
    }
    if cfg.min_layers == 0 || cfg.max_layers < cfg.min_layers {
        return Err(Error::InvalidArgument("layer count range is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_layers..=cfg.max_layers);
    // Split the range into bands so later (front) layers are closer.
    let (lo, hi) = (cfg.min_disparity, cfg.max_disparity);
    let band = (hi - lo) / n as f64;
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let b_lo = lo + band * l as f64;
        let b_hi = b_lo + band;
        let plane = random_plane(&mut rng, b_lo, b_hi, cfg);
        let shape = if l == 0 {
            Shape::Everywhere
        } else {
            let ci = rng.random_range(0.15 * h..0.85 * h);
            let cj = rng.random_range(0.15 * w..0.85 * w);
            let ri = rng.random_range(0.12 * h..0.35 * h);
            let rj = rng.random_range(0.08 * w..0.25 * w);
            if rng.random_bool(0.5) {
                Shape::Rect {
                    top: ci - ri,
                    left: cj - rj,
                    bottom: ci + ri,
                    right: cj + rj,
                }
            } else {
                Shape::Ellipse { ci, cj, ri, rj }
            }
        };
        layers.push(Layer {
            plane,
            shape,
            colour: random_colour(&mut rng),
            texture_seed: rng.random(),
        });
    }
    render(&layers, cfg.height, cfg.width, cfg.texture, cfg.dot_size, seed)
}
