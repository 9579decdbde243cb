//! Local refinement at 1/4 resolution: one label per pixel, neighbour edges
//! only, decoded to full-resolution residuals.

use candle_core::{DType, Tensor};

use crate::config::{ModelConfig, SelfEdges};
use crate::features::FeaturePyramid;
use crate::nmrf::{build_layers, run_layers, unfold_blocks, MessagePassingLayer, MrfGraph};
use crate::nn::{tensor_from, Mlp, Scope};
use crate::observed::LabelFeatureEncoder;
use crate::{Error, Result};

/// Lower median (8th smallest of 16) of each 4×4 block of a `(B, H, W)` map.
pub fn median_pool4(map: &[f32], batch: usize, height: usize, width: usize) -> Vec<f32> {
    let (h4, w4) = (height / 4, width / 4);
    let mut out = Vec::with_capacity(batch * h4 * w4);
    let mut block = [0f32; 16];
    for b in 0..batch {
        for i in 0..h4 {
            for j in 0..w4 {
                for u in 0..4 {
                    for v in 0..4 {
                        block[u * 4 + v] = map[(b * height + i * 4 + u) * width + j * 4 + v];
                    }
                }
                block.sort_by(f32::total_cmp);
                out.push(block[7]);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub encoder: LabelFeatureEncoder,
    pub layers: Vec<MessagePassingLayer>,
    pub decoder: Mlp,
    window: usize,
    encoding_dim: usize,
    max_disparity: f64,
}

impl Refinement {
    pub fn new(scope: &mut Scope<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            encoder: LabelFeatureEncoder::new(&mut scope.sub("observed"), cfg, 4)?,
            layers: build_layers(
                &mut scope.sub("mrf"),
                cfg,
                cfg.refinement_layers,
                cfg.refinement_window,
                SelfEdges::Off,
                false,
            )?,
            decoder: Mlp::new(&mut scope.sub("decoder"), d, d, 16)?,
            window: cfg.refinement_window,
            encoding_dim: cfg.disparity_encoding_dim,
            max_disparity: cfg.max_disparity as f64,
        })
    }

    pub fn graph(&self, batch: usize, height: usize, width: usize, dtype: DType) -> Result<MrfGraph> {
        MrfGraph::new(batch, height, width, 1, self.window, false, dtype)
    }

    /// Refines a full-resolution labelling `(B, H, W)` (host values, treated
    /// as constants) and returns `(B, H, W)`.
    pub fn forward(&self, pyramid: &FeaturePyramid, labelling: &[f32]) -> Result<Tensor> {
        let (b, _, h4, w4) = pyramid.fine_left.dims4()?;
        let (hh, ww) = (h4 * 4, w4 * 4);
        if labelling.len() != b * hh * ww {
            return Err(Error::Shape(format!(
                "labelling of {} values does not cover {b}x{hh}x{ww}",
                labelling.len()
            )));
        }
        let dtype = pyramid.fine_left.dtype();
        let dev = pyramid.fine_left.device().clone();
        let pooled: Vec<f64> = median_pool4(labelling, b, hh, ww).iter().map(|&v| v as f64).collect();
        let labels = tensor_from(pooled, (b, h4, w4, 1), dtype, &dev)?;
        let graph = self.graph(b, h4, w4, dtype)?;
        let mu = self.encoder.forward(&pyramid.fine_left, &pyramid.fine_right, &labels)?;
        let x = run_layers(&self.layers, &graph, &mu, &labels, self.encoding_dim)?;
        let residual = unfold_blocks(&self.decoder.forward(&x)?, 4)?.squeeze(1)?;
        let base = crate::nmrf::upsample_labels(&labels, 4)?.squeeze(1)?;
        Ok((base + residual)?.clamp(0.0, self.max_disparity)?)
    }
}
