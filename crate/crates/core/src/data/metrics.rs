//! End-point error, bad-pixel ratios and candidate recall.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RECALL_THRESHOLDS: [f64; 3] = [3.0, 8.0, 16.0];

/// Aggregate metrics over valid pixels. Every value is `None` when no pixel
/// was valid; proposal fields are `None` when no candidates were supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub pixels: usize,
    pub defined: bool,
    pub epe: Option<f64>,
    pub bad_1: Option<f64>,
    pub bad_2: Option<f64>,
    pub bad_3: Option<f64>,
    pub d1: Option<f64>,
    pub recall_3: Option<f64>,
    pub recall_8: Option<f64>,
    pub recall_16: Option<f64>,
    pub proposal_epe: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let pct = [
            ("bad_1", self.bad_1),
            ("bad_2", self.bad_2),
            ("bad_3", self.bad_3),
            ("d1", self.d1),
            ("recall_3", self.recall_3),
            ("recall_8", self.recall_8),
            ("recall_16", self.recall_16),
        ];
        for (name, v) in pct {
            if let Some(v) = v {
                if !(0.0..=100.0).contains(&v) {
                    return Err(Error::InvalidArgument(format!("{name} = {v} is not a percentage")));
                }
            }
        }
        for (name, v) in [("epe", self.epe), ("proposal_epe", self.proposal_epe)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::InvalidArgument(format!("{name} = {v} is not a valid error")));
                }
            }
        }
        if self.defined != (self.pixels > 0) || self.defined != self.epe.is_some() {
            return Err(Error::InvalidArgument("defined flag disagrees with pixel count".into()));
        }
        if let (Some(r3), Some(r8), Some(r16)) = (self.recall_3, self.recall_8, self.recall_16) {
            if r3 > r8 || r8 > r16 {
                return Err(Error::InvalidArgument("recall must grow with the threshold".into()));
            }
        }
        Ok(())
    }
}

/// Running sums; add images one at a time and finish once.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    pixels: usize,
    abs_err: f64,
    bad: [usize; 3],
    d1: usize,
    cand_pixels: usize,
    recall: [usize; 3],
    best_err: f64,
}

impl MetricsAccumulator {
    /// `pred`, `gt`, `valid` are per pixel. `candidates`, if given, holds
    /// `k` candidate disparities per pixel.
    pub fn add(&mut self, pred: &[f32], gt: &[f32], valid: &[bool], candidates: Option<(&[f32], usize)>) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != valid.len() {
            return Err(Error::Shape(format!(
                "prediction {}, ground truth {}, mask {} differ in size",
                pred.len(),
                gt.len(),
                valid.len()
            )));
        }
        if let Some((c, k)) = candidates {
            if k == 0 || c.len() != gt.len() * k {
                return Err(Error::Shape(format!("{} candidates for {} pixels", c.len(), gt.len())));
            }
        }
        for n in 0..gt.len() {
            if !valid[n] {
                continue;
            }
            let g = gt[n] as f64;
            let e = (pred[n] as f64 - g).abs();
            self.pixels += 1;
            self.abs_err += e;
            for (t, thr) in [1.0, 2.0, 3.0].iter().enumerate() {
                if e > *thr {
                    self.bad[t] += 1;
                }
            }
            if e > 3.0 && e > 0.05 * g.abs() {
                self.d1 += 1;
            }
            if let Some((c, k)) = candidates {
                let best = c[n * k..(n + 1) * k]
                    .iter()
                    .map(|&z| (z as f64 - g).abs())
                    .fold(f64::INFINITY, f64::min);
                self.cand_pixels += 1;
                self.best_err += best;
                for (t, thr) in RECALL_THRESHOLDS.iter().enumerate() {
                    if best <= *thr {
                        self.recall[t] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricsReport {
        let n = self.pixels;
        let pct = |c: usize, of: usize| if of > 0 { Some(100.0 * c as f64 / of as f64) } else { None };
        let cn = self.cand_pixels;
        MetricsReport {
            pixels: n,
            defined: n > 0,
            epe: (n > 0).then(|| self.abs_err / n as f64),
            bad_1: pct(self.bad[0], n),
            bad_2: pct(self.bad[1], n),
            bad_3: pct(self.bad[2], n),
            d1: pct(self.d1, n),
            recall_3: pct(self.recall[0], cn),
            recall_8: pct(self.recall[1], cn),
            recall_16: pct(self.recall[2], cn),
            proposal_epe: (cn > 0).then(|| self.best_err / cn as f64),
        }
    }
}

pub fn compute_metrics(pred: &[f32], gt: &[f32], valid: &[bool], candidates: Option<(&[f32], usize)>) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, gt, valid, candidates)?;
    Ok(acc.finish())
}

/// Replicates per-coarse-pixel candidates `(B, h, w, k)` onto the
/// full-resolution grid `(B, h·f, w·f, k)`.
pub fn upsample_candidates(coarse: &[f32], batch: usize, h: usize, w: usize, k: usize, factor: usize) -> Vec<f32> {
    let (hh, ww) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(batch * hh * ww * k);
    for b in 0..batch {
        for i in 0..hh {
            for j in 0..ww {
                let s = ((b * h + i / factor) * w + j / factor) * k;
                out.extend_from_slice(&coarse[s..s + k]);
            }
        }
    }
    out
}
