//! Optimisation: AdamW with a one-cycle schedule, batching, the training
//! loop and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{PairFiles, RunConfig, SegmenterConfig};
use crate::data::io::{format_for, read_disparity, read_rgb, read_segments};
use crate::data::metrics::{upsample_candidates, MetricsAccumulator, MetricsReport};
use crate::data::synthetic::{generate_synthetic_pair, SyntheticScene};
use crate::data::{crop_map, images_to_tensor, pad_map, RgbImage};
use crate::features::Padding;
use crate::model::{ModelOutput, NmrfModel, Prediction};
use crate::nn::{to_f32_vec, ParamStore};
use crate::supervision::losses::{
    disparity_loss, init_loss, proposal_loss, refinement_loss, supervised_mask, LossTerms,
};
use crate::supervision::segment::{check_segments, slic};
use crate::supervision::superpixel::{superpixel_downsample, GtModals};
use crate::{Error, Result};

/// One stereo pair with dense ground truth and a segment map.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub left: RgbImage,
    pub right: RgbImage,
    pub disparity: Vec<f32>,
    pub valid: Vec<bool>,
    pub segments: Vec<u32>,
}

impl TrainingSample {
    pub fn from_scene(scene: SyntheticScene, segmenter: &SegmenterConfig) -> Self {
        let segments = slic(&scene.left, segmenter);
        Self {
            left: scene.left,
            right: scene.right,
            disparity: scene.disparity,
            valid: scene.valid,
            segments,
        }
    }

    pub fn load(files: &PairFiles, segmenter: &SegmenterConfig) -> Result<Self> {
        let left = read_rgb(files.left.as_ref())?;
        let right = read_rgb(files.right.as_ref())?;
        if (left.height, left.width) != (right.height, right.width) {
            return Err(Error::Shape(format!("{} and {} differ in size", files.left, files.right)));
        }
        let (h, w) = (left.height, left.width);
        let (disparity, valid) = match &files.disparity {
            Some(p) => {
                let path = std::path::Path::new(p);
                let format = files
                    .format
                    .or_else(|| format_for(path))
                    .ok_or_else(|| Error::InvalidArgument(format!("cannot tell the format of {p}")))?;
                let d = read_disparity(path, format)?;
                if (d.height, d.width) != (h, w) {
                    return Err(Error::Shape(format!("disparity {p} does not match the images")));
                }
                (d.values, d.valid)
            }
            None => (vec![0.0; h * w], vec![false; h * w]),
        };
        let segments = match &files.segments {
            Some(p) => {
                let (sh, sw, s) = read_segments(p.as_ref())?;
                check_segments(&s, h, w).map_err(|_| Error::Shape(format!("segments {p} are {sh}x{sw}")))?;
                s
            }
            None => slic(&left, segmenter),
        };
        Ok(Self {
            left,
            right,
            disparity,
            valid,
            segments,
        })
    }
}

/// Builds the training (or held-out) split from the data section.
pub fn build_split(cfg: &RunConfig, train: bool) -> Result<Vec<TrainingSample>> {
    let files = if train { &cfg.data.train_files } else { &cfg.data.eval_files };
    if !files.is_empty() {
        return files.iter().map(|f| TrainingSample::load(f, &cfg.data.segmenter)).collect();
    }
    let (count, offset) = if train {
        (cfg.data.train_scenes, 0)
    } else {
        (cfg.data.eval_scenes, 1_000_000)
    };
    (0..count)
        .map(|n| {
            let seed = cfg.data.seed.wrapping_mul(1_000_003).wrapping_add(offset + n as u64);
            let scene = generate_synthetic_pair(&cfg.data.synthetic, cfg.model.max_disparity, seed)?;
            Ok(TrainingSample::from_scene(scene, &cfg.data.segmenter))
        })
        .collect()
}

/// A batch ready for the model, padded to a multiple of 8.
#[derive(Debug, Clone)]
pub struct Batch {
    pub left: Tensor,
    pub right: Tensor,
    pub padding: Padding,
    /// `(B, H, W)` at padded size.
    pub gt: Vec<f32>,
    /// Pixels that supervise the disparity losses.
    pub mask: Vec<bool>,
    pub modals: GtModals,
}

pub fn make_batch(
    samples: &[&TrainingSample],
    crop: Option<[usize; 2]>,
    rng: &mut ChaCha8Rng,
    dtype: DType,
    max_disparity: usize,
) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h0, w0) = (first.left.height, first.left.width);
    let (h, w) = match crop {
        Some([ch, cw]) => (ch.min(h0), cw.min(w0)),
        None => (h0, w0),
    };
    let pad = Padding::for_size(h, w);
    let (hp, wp) = (pad.padded_height, pad.padded_width);
    let mut lefts = Vec::new();
    let mut rights = Vec::new();
    let mut gt = Vec::with_capacity(samples.len() * hp * wp);
    let mut valid = Vec::with_capacity(samples.len() * hp * wp);
    let mut segs = Vec::with_capacity(samples.len() * hp * wp);
    for s in samples {
        if (s.left.height, s.left.width) != (h0, w0) {
            return Err(Error::Shape("batch mixes image sizes".into()));
        }
        let top = if h0 > h { rng.random_range(0..=h0 - h) } else { 0 };
        let left = if w0 > w { rng.random_range(0..=w0 - w) } else { 0 };
        lefts.push(s.left.crop(top, left, h, w));
        rights.push(s.right.crop(top, left, h, w));
        let g = crop_map(&s.disparity, w0, top, left, h, w);
        let mut v = crop_map(&s.valid, w0, top, left, h, w);
        if left > 0 {
            // The match of a pixel near the crop's left edge may lie outside the crop.
            for (n, ok) in v.iter_mut().enumerate() {
                *ok &= (n % w) as f32 - g[n] >= -0.5;
            }
        }
        let sg = crop_map(&s.segments, w0, top, left, h, w);
        gt.extend(pad_map(&g, h, w, hp, wp, 0.0));
        valid.extend(pad_map(&v, h, w, hp, wp, false));
        segs.extend(pad_map(&sg, h, w, hp, wp, u32::MAX));
    }
    let b = samples.len();
    let mask = supervised_mask(&gt, &valid, max_disparity as f32);
    let modals = superpixel_downsample(&gt, &mask, &segs, b, hp, wp);
    let lrefs: Vec<&RgbImage> = lefts.iter().collect();
    let rrefs: Vec<&RgbImage> = rights.iter().collect();
    Ok(Batch {
        left: images_to_tensor(&lrefs, dtype)?,
        right: images_to_tensor(&rrefs, dtype)?,
        padding: pad,
        gt,
        mask,
        modals,
    })
}

pub fn compute_losses(out: &ModelOutput, batch: &Batch, nms_threshold: f64) -> Result<LossTerms> {
    Ok(LossTerms {
        init: init_loss(&out.volume, &batch.modals)?,
        proposal: proposal_loss(&out.candidates.disparities, &batch.modals, nms_threshold as f32)?,
        coarse: disparity_loss(&out.field.hypotheses, &out.field.probabilities, &batch.gt, &batch.mask)?,
        refine: refinement_loss(&out.refined, &batch.gt, &batch.mask)?,
    })
}

/// One-cycle schedule with cosine warm-up and cosine decay.
pub fn one_cycle_lr(step: usize, total: usize, max_lr: f64, pct_start: f64, div: f64, final_div: f64) -> f64 {
    let initial = max_lr / div;
    let min_lr = initial / final_div;
    let total = total.max(1) as f64;
    let warm = (pct_start * total).max(1.0);
    let s = step as f64;
    let cos = |from: f64, to: f64, t: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * t.clamp(0.0, 1.0)).cos());
    if s < warm {
        cos(initial, max_lr, s / warm)
    } else {
        cos(max_lr, min_lr, (s - warm) / (total - warm).max(1.0))
    }
}

/// AdamW with decoupled weight decay. Moments are kept by parameter name so
/// they can be checkpointed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Global gradient norm over every parameter that received a gradient.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for var in store.vars().values() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * grad_scale)?;
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub init: f64,
    pub proposal: f64,
    pub coarse: f64,
    pub refine: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: NmrfModel,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = NmrfModel::new(&config.model, DType::F32, config.train.seed)?;
        Ok(Self {
            optimizer: AdamW::new(config.train.weight_decay),
            model,
            config,
            step: 0,
        })
    }

    /// Sample indices for a step; a pure function of seed and step so that a
    /// resumed run sees the same data order.
    pub fn batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let b = self.config.train.batch;
        let per_epoch = n.div_ceil(b).max(1);
        let epoch = step / per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        order.shuffle(&mut rng);
        let start = (step % per_epoch) * b;
        (0..b).map(|o| order[(start + o) % n]).collect()
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = &self.config.train;
        one_cycle_lr(step, t.steps, t.max_lr, t.pct_start, t.div_factor, t.final_div_factor)
    }

    pub fn train_step(&mut self, samples: &[TrainingSample]) -> Result<StepLog> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let started = Instant::now();
        let step = self.step;
        let picked: Vec<&TrainingSample> = self.batch_indices(step, samples.len()).into_iter().map(|i| &samples[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed.wrapping_add(0xC0FFEE).wrapping_add(step as u64));
        let batch = make_batch(&picked, self.config.train.crop, &mut rng, self.model.dtype(), self.config.model.max_disparity)?;
        let out = self.model.forward(&batch.left, &batch.right)?;
        let terms = compute_losses(&out, &batch, self.config.loss.nms_threshold)?;
        let total = terms.total(&self.config.loss)?;
        let values = terms.values()?;
        let total_v = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !total_v.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {total_v} (init {}, proposal {}, coarse {}, refine {}); {}",
                    values[0],
                    values[1],
                    values[2],
                    values[3],
                    diagnostics(&out)?
                ),
            });
        }
        let grads = total.backward()?;
        let norm = AdamW::grad_norm(&self.model.store, &grads)?;
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {norm}; {}", diagnostics(&out)?),
            });
        }
        let clip = self.config.train.grad_clip;
        let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let lr = self.lr(step);
        self.optimizer.step(&self.model.store, &grads, lr, scale)?;
        self.step += 1;
        Ok(StepLog {
            step,
            lr,
            total: total_v,
            init: values[0],
            proposal: values[1],
            coarse: values[2],
            refine: values[3],
            grad_norm: norm,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Summary statistics of intermediate tensors for divergence reports.
pub fn diagnostics(out: &ModelOutput) -> Result<String> {
    let stat = |t: &Tensor| -> Result<String> {
        let v = to_f32_vec(t)?;
        let bad = v.iter().filter(|x| !x.is_finite()).count();
        let max = v.iter().filter(|x| x.is_finite()).fold(0f32, |m, x| m.max(x.abs()));
        Ok(format!("non-finite {bad}/{}, max |x| {max}", v.len()))
    };
    Ok(format!(
        "coarse features: {}; cost volume: {}; candidates: {}; hypotheses: {}; refined: {}",
        stat(&out.pyramid.coarse_left)?,
        stat(&out.volume.values)?,
        stat(&out.candidates.disparities)?,
        stat(&out.field.hypotheses)?,
        stat(&out.refined)?
    ))
}

/// Per-image outputs and aggregate metrics of an evaluation pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub coarse_metrics: MetricsReport,
    pub per_image: Vec<MetricsReport>,
    pub predictions: Vec<Prediction>,
}

/// Candidate disparities of a prediction on its full-resolution grid.
pub fn full_res_candidates(p: &Prediction) -> Vec<f32> {
    let (gh, gw) = p.grid;
    let up = upsample_candidates(&p.candidates, 1, gh, gw, p.k, 8);
    let wp = gw * 8;
    let mut out = Vec::with_capacity(p.height * p.width * p.k);
    for i in 0..p.height {
        let s = (i * wp) * p.k;
        out.extend_from_slice(&up[s..s + p.width * p.k]);
    }
    out
}

pub fn evaluate(model: &NmrfModel, samples: &[TrainingSample]) -> Result<Evaluation> {
    let mut all = MetricsAccumulator::default();
    let mut coarse = MetricsAccumulator::default();
    let mut per_image = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    let zmax = model.config.max_disparity as f32;
    for s in samples {
        let p = model.predict(&s.left, &s.right)?;
        let mask = supervised_mask(&s.disparity, &s.valid, zmax);
        let cands = full_res_candidates(&p);
        let mut one = MetricsAccumulator::default();
        one.add(&p.disparity, &s.disparity, &mask, Some((&cands, p.k)))?;
        all.add(&p.disparity, &s.disparity, &mask, Some((&cands, p.k)))?;
        coarse.add(&p.coarse, &s.disparity, &mask, Some((&cands, p.k)))?;
        per_image.push(one.finish());
        predictions.push(p);
    }
    Ok(Evaluation {
        metrics: all.finish(),
        coarse_metrics: coarse.finish(),
        per_image,
        predictions,
    })
}
