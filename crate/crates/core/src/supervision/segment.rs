//! A compact SLIC-style superpixel segmenter, plus a check that a segment
//! map fits its image.

use crate::config::SegmenterConfig;
use crate::data::RgbImage;
use crate::{Error, Result};

/// k-means in joint colour/position space, restricted to a `2·step` search
/// window around each centre. Returns one label per pixel, row-major.
pub fn slic(image: &RgbImage, cfg: &SegmenterConfig) -> Vec<u32> {
    let (h, w) = (image.height, image.width);
    let step = cfg.step.max(2);
    let mut centres: Vec<[f64; 5]> = Vec::new();
    let mut i = step / 2;
    while i < h {
        let mut j = step / 2;
        while j < w {
            let c = image.pixel(i, j);
            centres.push([i as f64, j as f64, c[0] as f64, c[1] as f64, c[2] as f64]);
            j += step;
        }
        i += step;
    }
    let mut labels = vec![0u32; h * w];
    let spatial = cfg.compactness / step as f64;
    for _ in 0..cfg.iterations.max(1) {
        let mut best = vec![f64::INFINITY; h * w];
        for (n, c) in centres.iter().enumerate() {
            let (ci, cj) = (c[0].round() as isize, c[1].round() as isize);
            let r = step as isize;
            for ii in (ci - r).max(0)..(ci + r + 1).min(h as isize) {
                for jj in (cj - r).max(0)..(cj + r + 1).min(w as isize) {
                    let p = image.pixel(ii as usize, jj as usize);
                    let dc: f64 = (0..3).map(|k| (p[k] as f64 - c[2 + k]).powi(2)).sum();
                    let ds = (ii as f64 - c[0]).powi(2) + (jj as f64 - c[1]).powi(2);
                    let d = dc + ds * spatial * spatial;
                    let idx = ii as usize * w + jj as usize;
                    if d < best[idx] {
                        best[idx] = d;
                        labels[idx] = n as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0f64; 6]; centres.len()];
        for ii in 0..h {
            for jj in 0..w {
                let p = image.pixel(ii, jj);
                let a = &mut acc[labels[ii * w + jj] as usize];
                a[0] += ii as f64;
                a[1] += jj as f64;
                for k in 0..3 {
                    a[2 + k] += p[k] as f64;
                }
                a[5] += 1.0;
            }
        }
        for (c, a) in centres.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                for k in 0..5 {
                    c[k] = a[k] / a[5];
                }
            }
        }
    }
    labels
}

pub fn check_segments(segments: &[u32], height: usize, width: usize) -> Result<()> {
    if segments.len() != height * width {
        return Err(Error::Shape(format!(
            "segment map has {} entries, image is {height}x{width}",
            segments.len()
        )));
    }
    Ok(())
}
