//! Seed propagation with row/column stripe attention, then per-seed
//! disparity residuals.
//!
//! Half of the heads attend across all seeds of the same image row, the other
//! half across the same column. A locally-enhanced positional term adds the
//! value of the pixel itself and of its two stripe neighbours.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::cost::LabelSeeds;
use crate::nn::{masked_softmax, softmax_last, tensor_from, Init, LayerNorm, Linear, Mlp, Scope};
use crate::Result;

/// Every seed slot sharing a row or a column with `(i, j)`, the pixel's own
/// slots included once: `k·(height + width - 1)` triples `(row, col, slot)`.
pub fn cross_window_partners(i: usize, j: usize, height: usize, width: usize, k: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity((height + width) * k);
    for jj in 0..width {
        for s in 0..k {
            out.push((i, jj, s));
        }
    }
    for ii in (0..height).filter(|&ii| ii != i) {
        for s in 0..k {
            out.push((ii, j, s));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CrossStripeBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    /// Rows: previous neighbour, self, next neighbour.
    pub lepe_weight: Tensor,
    pub lepe_bias: Tensor,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub mask_same_pixel: bool,
}

impl CrossStripeBlock {
    pub fn new(scope: &mut Scope<'_>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(Self {
            norm1: LayerNorm::new(&mut scope.sub("norm1"), d)?,
            qkv: Linear::new(&mut scope.sub("qkv"), d, 3 * d)?,
            lepe_weight: scope.param("lepe_weight", &[3, d], Init::Uniform(0.5))?,
            lepe_bias: scope.param("lepe_bias", &[d], Init::Zeros)?,
            out: Linear::new(&mut scope.sub("out"), d, d)?,
            norm2: LayerNorm::new(&mut scope.sub("norm2"), d)?,
            mlp: Mlp::new(&mut scope.sub("mlp"), d, cfg.mlp_ratio * d, d)?,
            heads: cfg.heads,
            mask_same_pixel: cfg.proposal_mask_same_pixel,
        })
    }

    /// `x`: `(B, h, w, k, D)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let msg = self.attention(&self.norm1.forward(x)?)?;
        let x = (x + self.out.forward(&msg)?)?;
        let y = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + y)?)
    }

    /// Stripe attention plus the positional term, before the output
    /// projection.
    pub fn attention(&self, xn: &Tensor) -> Result<Tensor> {
        let (b, h, w, k, d) = xn.dims5()?;
        let half = d / 2;
        let hh = self.heads / 2;
        let dh = half / hh;
        let qkv = self.qkv.forward(xn)?;
        let q = qkv.narrow(D::Minus1, 0, d)?;
        let kk = qkv.narrow(D::Minus1, d, d)?;
        let v = qkv.narrow(D::Minus1, 2 * d, d)?;

        // Rows: (B*h, hh, w*k, dh).
        let rows = |t: &Tensor| -> Result<Tensor> {
            Ok(t.narrow(D::Minus1, 0, half)?
                .reshape((b * h, w * k, hh, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        // Columns: (B*w, hh, h*k, dh).
        let cols = |t: &Tensor| -> Result<Tensor> {
            Ok(t.narrow(D::Minus1, half, half)?
                .permute((0, 2, 1, 3, 4))?
                .reshape((b * w, h * k, hh, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let row_out = self
            .attend(&rows(&q)?, &rows(&kk)?, &rows(&v)?, w, k)?
            .transpose(1, 2)?
            .reshape((b, h, w, k, half))?;
        let col_out = self
            .attend(&cols(&q)?, &cols(&kk)?, &cols(&v)?, h, k)?
            .transpose(1, 2)?
            .reshape((b, w, h, k, half))?
            .permute((0, 2, 1, 3, 4))?;
        let attn = Tensor::cat(&[row_out, col_out], D::Minus1)?;
        Ok((attn + self.positional(&v)?)?)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, len: usize, slots: usize) -> Result<Tensor> {
        let dh = q.dims()[3];
        let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let alpha = if self.mask_same_pixel {
            let n = len * slots;
            let mut m = vec![0.0; n * n];
            for a in 0..n {
                for c in 0..n {
                    if a == c || a / slots != c / slots {
                        m[a * n + c] = 1.0;
                    }
                }
            }
            let mask = tensor_from(m, (1, 1, n, n), q.dtype(), q.device())?;
            masked_softmax(&logits, &mask)?
        } else {
            softmax_last(&logits)?
        };
        Ok(alpha.matmul(v)?)
    }

    /// `w_self ⊙ v + w_prev ⊙ mean_prev + w_next ⊙ mean_next + bias` where the
    /// means are over the seeds of the neighbouring pixel along the stripe
    /// (zero beyond the border).
    fn positional(&self, v: &Tensor) -> Result<Tensor> {
        let (_, h, w, _, d) = v.dims5()?;
        let half = d / 2;
        let mean = v.mean(3)?;
        let mh = mean.narrow(D::Minus1, 0, half)?;
        let mv = mean.narrow(D::Minus1, half, half)?;
        let prev = Tensor::cat(
            &[
                mh.pad_with_zeros(2, 1, 0)?.narrow(2, 0, w)?,
                mv.pad_with_zeros(1, 1, 0)?.narrow(1, 0, h)?,
            ],
            D::Minus1,
        )?;
        let next = Tensor::cat(
            &[
                mh.pad_with_zeros(2, 0, 1)?.narrow(2, 1, w)?,
                mv.pad_with_zeros(1, 0, 1)?.narrow(1, 1, h)?,
            ],
            D::Minus1,
        )?;
        let w_prev = self.lepe_weight.get(0)?;
        let w_self = self.lepe_weight.get(1)?;
        let w_next = self.lepe_weight.get(2)?;
        let around = (prev.broadcast_mul(&w_prev)? + next.broadcast_mul(&w_next)?)?.unsqueeze(3)?;
        Ok(v.broadcast_mul(&w_self)?
            .broadcast_add(&around)?
            .broadcast_add(&self.lepe_bias)?)
    }
}

/// Refined candidates: disparities `(B, h, w, k)` and features
/// `(B, h, w, k, D)`.
#[derive(Debug, Clone)]
pub struct CandidateLabels {
    pub disparities: Tensor,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct ProposalNetwork {
    blocks: Vec<CrossStripeBlock>,
    decoder: Mlp,
    max_disparity: usize,
}

impl ProposalNetwork {
    pub fn new(scope: &mut Scope<'_>, cfg: &ModelConfig) -> Result<Self> {
        let blocks = (0..cfg.proposal_layers)
            .map(|i| CrossStripeBlock::new(&mut scope.sub(format!("block{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            decoder: Mlp::new(&mut scope.sub("decoder"), cfg.embed_dim, cfg.embed_dim, 1)?,
            max_disparity: cfg.max_disparity,
        })
    }

    pub fn blocks(&self) -> &[CrossStripeBlock] {
        &self.blocks
    }

    pub fn forward(&self, seed_features: &Tensor, seeds: &LabelSeeds) -> Result<CandidateLabels> {
        let mut x = seed_features.clone();
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let residual = self.decoder.forward(&x)?.squeeze(D::Minus1)?;
        let base: Vec<f64> = seeds.disparities().iter().map(|&v| v as f64).collect();
        let base = tensor_from(base, residual.shape(), residual.dtype(), residual.device())?;
        let disparities = (base + residual)?.clamp(0.0, self.max_disparity as f64)?;
        Ok(CandidateLabels {
            disparities,
            features: x,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_f64_vec, ParamStore};
    use candle_core::{DType, Device};

    fn cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            heads: 4,
            k: 2,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn partners_cover_row_and_column() {
        let p = cross_window_partners(1, 2, 3, 4, 2);
        assert_eq!(p.len(), (3 + 4 - 1) * 2);
        assert!(p.iter().all(|&(i, j, _)| i == 1 || j == 2));
    }

    #[test]
    fn zero_branches_leave_features_unchanged() {
        let c = cfg();
        let mut store = ParamStore::new(DType::F64, 1);
        let block = CrossStripeBlock::new(&mut store.root(), &c).unwrap();
        for (name, var) in store.vars() {
            if name.starts_with("out.") || name.starts_with("mlp.fc2") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::randn(0f64, 1.0, (1, 3, 4, 2, 8), &Device::Cpu).unwrap();
        let y = block.forward(&x).unwrap();
        assert_eq!(to_f64_vec(&x).unwrap(), to_f64_vec(&y).unwrap());
    }

    #[test]
    fn slot_permutation_equivariance() {
        let c = cfg();
        let mut store = ParamStore::new(DType::F64, 2);
        let block = CrossStripeBlock::new(&mut store.root(), &c).unwrap();
        store.randomize(0.5).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 3, 4, 2, 8), &Device::Cpu).unwrap();
        let swap = |t: &Tensor| {
            Tensor::cat(&[t.narrow(3, 1, 1).unwrap(), t.narrow(3, 0, 1).unwrap()], 3).unwrap()
        };
        let a = swap(&block.forward(&x).unwrap());
        let b = block.forward(&swap(&x)).unwrap();
        let d = to_f64_vec(&(a - b).unwrap().abs().unwrap()).unwrap();
        assert!(d.iter().all(|v| *v < 1e-10));
    }
}
