//! Appearance embedding of a disparity label: the left feature, the right
//! feature sampled at the matched position, and their group-wise correlation.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::nn::{index_tensor, tensor_from, to_f64_vec, Mlp, Scope};
use crate::{Error, Result};

/// Per-group inner products scaled by `groups / channels`:
/// `(.., C) × (.., C) → (.., groups)`.
pub fn group_correlation(a: &Tensor, b: &Tensor, groups: usize) -> Result<Tensor> {
    let prod = a.broadcast_mul(b)?;
    let dims = prod.dims().to_vec();
    let c = *dims.last().ok_or_else(|| Error::Shape("scalar correlation input".into()))?;
    if c % groups != 0 {
        return Err(Error::Shape(format!("{c} channels do not split into {groups} groups")));
    }
    let mut grouped = dims.clone();
    *grouped.last_mut().unwrap() = groups;
    grouped.push(c / groups);
    let prod = prod.reshape(grouped)?.sum(D::Minus1)?;
    Ok((prod * (groups as f64 / c as f64))?)
}

/// Linear interpolation of a `(B, C, h, w)` map along rows at continuous
/// columns. `columns` is `(B, h, w, k)` and gives, for each label at pixel
/// `(i, j)`, the column to sample in row `i`; positions outside `[0, w-1]`
/// return zero vectors. Output: `(B, h, w, k, C)`.
pub fn sample_rows(map: &Tensor, columns: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = map.dims4()?;
    let k = columns.dims()[3];
    let rows = map.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?;
    let zero_row = b * h * w;
    let rows = Tensor::cat(&[rows, Tensor::zeros((1, c), map.dtype(), map.device())?], 0)?;

    let x = to_f64_vec(columns)?;
    let n = x.len();
    let mut idx0 = Vec::with_capacity(n);
    let mut idx1 = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    let mut inside = Vec::with_capacity(n);
    for (m, &xc) in x.iter().enumerate() {
        let row = m / (w * k);
        let ok = xc.is_finite() && xc >= 0.0 && xc <= (w - 1) as f64;
        let x0 = if ok { xc.floor() as usize } else { 0 };
        idx0.push(if ok { (row * w + x0) as u32 } else { zero_row as u32 });
        idx1.push(if ok && x0 + 1 < w { (row * w + x0 + 1) as u32 } else { zero_row as u32 });
        base.push(x0 as f64);
        inside.push(if ok { 1.0 } else { 0.0 });
    }
    let shape = columns.shape().clone();
    let frac = (columns - tensor_from(base, shape.clone(), columns.dtype(), columns.device())?)?;
    let inside = tensor_from(inside, shape, columns.dtype(), columns.device())?;
    let frac = (frac * &inside)?.unsqueeze(D::Minus1)?;
    let inside = inside.unsqueeze(D::Minus1)?;
    let v0 = rows.index_select(&index_tensor(idx0, n, map.device())?, 0)?.reshape((b, h, w, k, c))?;
    let v1 = rows.index_select(&index_tensor(idx1, n, map.device())?, 0)?.reshape((b, h, w, k, c))?;
    let w0 = (inside - &frac)?;
    Ok((v0.broadcast_mul(&w0)? + v1.broadcast_mul(&frac)?)?)
}

#[derive(Debug, Clone)]
pub struct LabelFeatureEncoder {
    unary: Mlp,
    pair: Mlp,
    fuse: Mlp,
    groups: usize,
    /// Full-resolution pixels per grid cell of the level.
    scale: f64,
}

impl LabelFeatureEncoder {
    pub fn new(scope: &mut Scope<'_>, cfg: &ModelConfig, scale: usize) -> Result<Self> {
        let c = cfg.feature_channels;
        let d = cfg.embed_dim;
        Ok(Self {
            unary: Mlp::normalizing(&mut scope.sub("unary"), c, c, d / 2)?,
            pair: Mlp::normalizing(&mut scope.sub("pair"), c, c, c)?,
            fuse: Mlp::new(&mut scope.sub("fuse"), d + cfg.groups, d, d)?,
            groups: cfg.groups,
            scale: scale as f64,
        })
    }

    /// Embeds labels with full-resolution disparities `(B, h, w, k)` against
    /// left/right maps `(B, C, h, w)` of the matching level.
    pub fn forward(&self, left: &Tensor, right: &Tensor, disparities: &Tensor) -> Result<Tensor> {
        let (b, _c, h, w) = left.dims4()?;
        let k = disparities.dims()[3];
        if disparities.dims()[..3] != [b, h, w] {
            return Err(Error::Shape(format!(
                "labels {:?} do not match feature grid {h}x{w}",
                disparities.dims()
            )));
        }
        let cols: Vec<f64> = (0..b * h * w * k).map(|m| ((m / k) % w) as f64).collect();
        let cols = tensor_from(cols, disparities.shape().clone(), disparities.dtype(), disparities.device())?;
        let x = (cols - (disparities / self.scale)?)?;
        let sampled = sample_rows(right, &x)?;

        let left_rows = left.permute((0, 2, 3, 1))?.unsqueeze(3)?;
        let lu = self.unary.forward(&left_rows)?;
        let ru = self.unary.forward(&sampled)?;
        let lp = self.pair.forward(&left_rows)?;
        let rp = self.pair.forward(&sampled)?;
        let corr = group_correlation(&lp, &rp, self.groups)?;
        let d2 = lu.dims()[4];
        let lu = lu.broadcast_as((b, h, w, k, d2))?;
        self.fuse.forward(&Tensor::cat(&[lu, ru, corr], D::Minus1)?)
    }
}
