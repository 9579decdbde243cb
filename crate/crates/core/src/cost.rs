//! Coarse correlation volume, modal detection and seed embeddings.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::nn::{index_tensor, sinusoidal, tensor_from, to_f32_vec, Mlp, Scope};
use crate::{Error, Result};

/// Inner-product correlation `(B, h, w, S)` over shifts `0..S` of the coarse
/// grid. Entries with `shift > j` have no partner and hold zero.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub values: Tensor,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub shifts: usize,
}

impl CostVolume {
    pub fn build(left: &Tensor, right: &Tensor, max_disparity: usize) -> Result<Self> {
        let (b, _c, h, w) = left.dims4()?;
        if right.dims() != left.dims() {
            return Err(Error::Shape(format!("feature maps {:?} vs {:?}", left.dims(), right.dims())));
        }
        let shifts = max_disparity / 8 + 1;
        let mut slices = Vec::with_capacity(shifts);
        for s in 0..shifts {
            let slice = if s < w {
                let prod = (left.narrow(3, s, w - s)? * right.narrow(3, 0, w - s)?)?.sum(1)?;
                prod.pad_with_zeros(2, s, 0)?
            } else {
                Tensor::zeros((b, h, w), left.dtype(), left.device())?
            };
            slices.push(slice);
        }
        let values = Tensor::stack(&slices, 3)?;
        Ok(Self {
            values,
            batch: b,
            height: h,
            width: w,
            shifts,
        })
    }

    pub fn is_valid(&self, j: usize, shift: usize) -> bool {
        shift <= j && shift < self.shifts
    }

    /// Host copy for modal detection; shifts without a partner pixel are
    /// `-inf` so they never win.
    pub fn detection_scores(&self) -> Result<Vec<f32>> {
        let mut v = to_f32_vec(&self.values.detach())?;
        for (n, row) in v.chunks_mut(self.shifts).enumerate() {
            let j = n % self.width;
            for (s, x) in row.iter_mut().enumerate() {
                if s > j {
                    *x = f32::NEG_INFINITY;
                }
            }
        }
        Ok(v)
    }
}

/// Shifts that are local maxima (ties included) among finite entries.
/// Equivalent to comparing against a width-3 max pool.
pub fn find_modals(row: &[f32]) -> Vec<usize> {
    let n = row.len();
    (0..n)
        .filter(|&s| {
            let v = row[s];
            if !v.is_finite() {
                return false;
            }
            let l = if s > 0 { row[s - 1] } else { f32::NEG_INFINITY };
            let r = if s + 1 < n { row[s + 1] } else { f32::NEG_INFINITY };
            v >= l && v >= r
        })
        .collect()
}

/// Picks `k` shifts: the best-scoring modals first, topped up with the
/// best non-modal shifts, finally ordered by score. Ties go to the lower
/// shift.
pub fn select_seeds(row: &[f32], k: usize) -> Vec<usize> {
    let rank = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    let mut modals = find_modals(row);
    modals.sort_by(rank);
    modals.truncate(k);
    if modals.len() < k {
        let mut rest: Vec<usize> = (0..row.len()).filter(|s| !modals.contains(s)).collect();
        rest.sort_by(rank);
        modals.extend(rest.into_iter().take(k - modals.len()));
    }
    modals.sort_by(rank);
    modals
}

/// The `k` seed shifts of every coarse pixel, laid out `(B, h, w, k)`.
#[derive(Debug, Clone)]
pub struct LabelSeeds {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub shifts: Vec<u32>,
    pub scores: Vec<f32>,
    /// Whether the pixel had at least one modal in its cost row.
    pub has_modal: Vec<bool>,
}

impl LabelSeeds {
    pub fn extract(volume: &CostVolume, k: usize) -> Result<Self> {
        if k > volume.shifts {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds the {} available shifts",
                volume.shifts
            )));
        }
        let scores_all = volume.detection_scores()?;
        let n = volume.batch * volume.height * volume.width;
        let mut shifts = Vec::with_capacity(n * k);
        let mut scores = Vec::with_capacity(n * k);
        let mut has_modal = Vec::with_capacity(n);
        for row in scores_all.chunks(volume.shifts) {
            let picked = select_seeds(row, k);
            has_modal.push(!find_modals(row).is_empty());
            for s in picked {
                shifts.push(s as u32);
                scores.push(row[s]);
            }
        }
        Ok(Self {
            batch: volume.batch,
            height: volume.height,
            width: volume.width,
            k,
            shifts,
            scores,
            has_modal,
        })
    }

    /// Full-resolution disparity of each seed.
    pub fn disparities(&self) -> Vec<f32> {
        self.shifts.iter().map(|&s| 8.0 * s as f32).collect()
    }

    pub fn index(&self, b: usize, i: usize, j: usize, s: usize) -> usize {
        ((b * self.height + i) * self.width + j) * self.k + s
    }
}

/// Values at `shift - r ..= shift + r` of a cost row, zero outside.
pub fn lookup_taps(row: &[f32], shift: usize, radius: usize) -> Vec<f32> {
    (0..=2 * radius)
        .map(|t| {
            let s = shift as isize + t as isize - radius as isize;
            if s >= 0 && (s as usize) < row.len() {
                row[s as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Embeds each seed from its local cost profile and its disparity.
#[derive(Debug, Clone)]
pub struct SeedEncoder {
    profile: Mlp,
    fuse: Mlp,
    radius: usize,
    encoding_dim: usize,
}

impl SeedEncoder {
    pub fn new(scope: &mut Scope<'_>, cfg: &ModelConfig) -> Result<Self> {
        let taps = 2 * cfg.lookup_radius + 1;
        let half = cfg.embed_dim / 2;
        Ok(Self {
            profile: Mlp::normalizing(&mut scope.sub("profile"), taps, half, half)?,
            fuse: Mlp::new(
                &mut scope.sub("fuse"),
                half + cfg.disparity_encoding_dim,
                cfg.embed_dim,
                cfg.embed_dim,
            )?,
            radius: cfg.lookup_radius,
            encoding_dim: cfg.disparity_encoding_dim,
        })
    }

    /// Gathers the `2r+1` cost taps around every seed: `(B, h, w, k, 2r+1)`.
    pub fn lookup(&self, volume: &CostVolume, seeds: &LabelSeeds) -> Result<Tensor> {
        let r = self.radius;
        let row_len = volume.shifts + 2 * r;
        let padded = volume.values.pad_with_zeros(D::Minus1, r, r)?.flatten_all()?;
        let taps = 2 * r + 1;
        let mut idx = Vec::with_capacity(seeds.shifts.len() * taps);
        for (n, &s) in seeds.shifts.iter().enumerate() {
            let pixel = n / seeds.k;
            for t in 0..taps {
                idx.push((pixel * row_len + s as usize + t) as u32);
            }
        }
        let len = idx.len();
        let gathered = padded.index_select(&index_tensor(idx, len, padded.device())?, 0)?;
        Ok(gathered.reshape((seeds.batch, seeds.height, seeds.width, seeds.k, taps))?)
    }

    /// Seed features `(B, h, w, k, D)`.
    pub fn forward(&self, volume: &CostVolume, seeds: &LabelSeeds) -> Result<Tensor> {
        let taps = self.lookup(volume, seeds)?;
        let profile = self.profile.forward(&taps)?;
        let z: Vec<f64> = seeds.disparities().iter().map(|&d| d as f64).collect();
        let z = tensor_from(
            z,
            (seeds.batch, seeds.height, seeds.width, seeds.k),
            taps.dtype(),
            taps.device(),
        )?;
        let pe = sinusoidal(&z, self.encoding_dim)?;
        self.fuse.forward(&Tensor::cat(&[profile, pe], D::Minus1)?)
    }
}
