//! Training objectives.

use candle_core::Tensor;

use crate::config::LossWeights;
use crate::cost::CostVolume;
use crate::nn::{log_softmax_last, tensor_from, to_f32_vec};
use crate::supervision::matching::match_targets;
use crate::supervision::superpixel::{GtModals, MAX_MODALS};
use crate::Result;

/// Weights of the leading modals in the initialisation target.
pub const MODAL_WEIGHTS: [f64; MAX_MODALS] = [0.5, 0.3, 0.1, 0.1];

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_tensor(x: &Tensor) -> Result<Tensor> {
    // Unit transition point: 0.5·min(|x|,1)² + max(|x|-1, 0).
    let a = x.abs()?;
    let inner = a.minimum(1.0)?;
    let outer = (a - 1.0)?.relu()?;
    Ok(((inner.sqr()? * 0.5)? + outer)?)
}

/// Keeps ground-truth modals in order of their distance to the nearest
/// proposal, dropping any modal closer than `threshold` to one already kept.
pub fn online_gt_nms(modals: &[f32], proposals: &[f32], threshold: f32) -> Vec<f32> {
    let proximity = |m: f32| proposals.iter().map(|p| (m - p).abs()).fold(f32::INFINITY, f32::min);
    let mut order: Vec<usize> = (0..modals.len()).collect();
    order.sort_by(|&a, &b| proximity(modals[a]).total_cmp(&proximity(modals[b])).then(a.cmp(&b)));
    let mut kept: Vec<f32> = Vec::new();
    for a in order {
        let m = modals[a];
        if kept.iter().all(|k| (k - m).abs() >= threshold) {
            kept.push(m);
        }
    }
    kept
}

/// Splits a mass placed at a fractional coarse disparity between its two
/// integer neighbours.
pub fn displace_mass(z: f64, mass: f64) -> [(usize, f64); 2] {
    let lo = z.floor();
    let frac = z - lo;
    [(lo as usize, mass * (1.0 - frac)), (lo as usize + 1, mass * frac)]
}

/// Leading weights for `n` modals, renormalised to sum to one.
pub fn modal_weights(n: usize) -> Vec<f64> {
    let w = &MODAL_WEIGHTS[..n.min(MAX_MODALS)];
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Target distribution over the shifts of one cost row.
pub fn init_target(modals: &[f32], shifts: usize) -> Vec<f64> {
    let mut t = vec![0.0; shifts];
    for (m, w) in modals.iter().zip(modal_weights(modals.len())) {
        let zc = (*m as f64 / 8.0).clamp(0.0, (shifts - 1) as f64);
        for (s, mass) in displace_mass(zc, w) {
            if s < shifts {
                t[s] += mass;
            } else {
                t[shifts - 1] += mass;
            }
        }
    }
    t
}

/// Cross-entropy between the displaced modal masses and the softmax of each
/// cost row, averaged over pixels that have modals.
pub fn init_loss(volume: &CostVolume, gt: &GtModals) -> Result<Tensor> {
    let s = volume.shifts;
    let n = volume.batch * volume.height * volume.width;
    let mut target = vec![0.0; n * s];
    let mut count = 0usize;
    for p in 0..n {
        let m = gt.disparities(p);
        if m.is_empty() {
            continue;
        }
        count += 1;
        target[p * s..(p + 1) * s].copy_from_slice(&init_target(&m, s));
    }
    let logp = log_softmax_last(&volume.values.reshape((n, s))?)?;
    let target = tensor_from(target, (n, s), logp.dtype(), logp.device())?;
    let total = (target * logp)?.sum_all()?.neg()?;
    Ok((total / count.max(1) as f64)?)
}

/// Matched pairs `(pixel, slot, target)` after online suppression.
pub fn proposal_targets(proposals: &[f32], k: usize, gt: &GtModals, threshold: f32) -> (Vec<(usize, usize, f32)>, usize) {
    let mut pairs = Vec::new();
    let mut count = 0;
    for (p, props) in proposals.chunks(k).enumerate() {
        let m = gt.disparities(p);
        if m.is_empty() {
            continue;
        }
        count += 1;
        let kept = online_gt_nms(&m, props, threshold);
        let kept = &kept[..kept.len().min(k)];
        for (t, slot) in match_targets(kept, props) {
            pairs.push((p, slot, kept[t]));
        }
    }
    (pairs, count)
}

/// Smooth-L1 between matched proposals and modals, summed per pixel and
/// averaged over pixels with modals. `proposals`: `(B, h, w, k)`.
pub fn proposal_loss(proposals: &Tensor, gt: &GtModals, threshold: f32) -> Result<Tensor> {
    let k = proposals.dims()[3];
    let host = to_f32_vec(&proposals.detach())?;
    let (pairs, count) = proposal_targets(&host, k, gt, threshold);
    let mut target = vec![0.0; host.len()];
    let mut mask = vec![0.0; host.len()];
    for (p, slot, z) in pairs {
        target[p * k + slot] = z as f64;
        mask[p * k + slot] = 1.0;
    }
    let shape = proposals.shape().clone();
    let target = tensor_from(target, shape.clone(), proposals.dtype(), proposals.device())?;
    let mask = tensor_from(mask, shape, proposals.dtype(), proposals.device())?;
    let per = (smooth_l1_tensor(&(proposals - target)?)? * mask)?;
    Ok((per.sum_all()? / count.max(1) as f64)?)
}

/// Expected absolute error under the hypothesis distribution, averaged over
/// valid pixels. `hypotheses`/`probabilities`: `(B, k, H, W)`; `gt`/`valid`
/// are `(B, H, W)` host maps.
pub fn disparity_loss(hypotheses: &Tensor, probabilities: &Tensor, gt: &[f32], valid: &[bool]) -> Result<Tensor> {
    let (b, _k, h, w) = hypotheses.dims4()?;
    let gt64: Vec<f64> = gt.iter().zip(valid).map(|(&g, &v)| if v { g as f64 } else { 0.0 }).collect();
    let mask: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let count = valid.iter().filter(|v| **v).count();
    let dt = hypotheses.dtype();
    let dev = hypotheses.device();
    let gt = tensor_from(gt64, (b, 1, h, w), dt, dev)?;
    let mask = tensor_from(mask, (b, 1, h, w), dt, dev)?;
    let err = hypotheses.broadcast_sub(&gt)?.abs()?;
    let per = (err * probabilities)?.broadcast_mul(&mask)?;
    Ok((per.sum_all()? / count.max(1) as f64)?)
}

/// Mean absolute error of a single-hypothesis map `(B, H, W)`.
pub fn refinement_loss(prediction: &Tensor, gt: &[f32], valid: &[bool]) -> Result<Tensor> {
    let p = prediction.unsqueeze(1)?;
    disparity_loss(&p, &p.ones_like()?, gt, valid)
}

/// Pixels that supervise the disparity losses: valid and within range.
pub fn supervised_mask(gt: &[f32], valid: &[bool], max_disparity: f32) -> Vec<bool> {
    gt.iter()
        .zip(valid)
        .map(|(&g, &v)| v && g.is_finite() && g >= 0.0 && g <= max_disparity)
        .collect()
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub init: Tensor,
    pub proposal: Tensor,
    pub coarse: Tensor,
    pub refine: Tensor,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let disp = (&self.coarse + &self.refine)?;
        Ok((((&self.init * w.init)? + (&self.proposal * w.proposal)?)? + (disp * w.disparity)?)?)
    }

    /// `[init, proposal, coarse, refine]` as host values.
    pub fn values(&self) -> Result<[f64; 4]> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
        Ok([v(&self.init)?, v(&self.proposal)?, v(&self.coarse)?, v(&self.refine)?])
    }
}
