//! Row-wise kernels with hand-written backward passes: normalisation,
//! (masked) softmax and GELU. Each replaces a chain of elementwise graph
//! nodes whose temporaries dominated the backward pass.

use candle_core::cpu::erf::erf_f64;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor, WithDType};

use crate::Result;

fn slice<'a, T: WithDType>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(storage)?;
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("fused kernel requires a contiguous operand"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn row_len(layout: &Layout) -> candle_core::Result<usize> {
    match layout.dims().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => candle_core::bail!("fused kernel needs a non-empty last axis"),
    }
}

macro_rules! dispatch {
    ($storage:expr, $f:ident ( $($arg:expr),* )) => {
        match $storage {
            CpuStorage::F32(_) => $f::<f32>($($arg),*),
            CpuStorage::F64(_) => $f::<f64>($($arg),*),
            _ => candle_core::bail!("fused kernel supports only f32 and f64"),
        }
    };
}

macro_rules! dispatch_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            other => candle_core::bail!("fused kernel does not support {other:?}"),
        }
    };
}

// Normalisation over the last axis.

struct RowNorm {
    eps: f64,
}

fn row_norm_fwd<T: WithDType>(s: &CpuStorage, l: &Layout, eps: f64) -> candle_core::Result<(CpuStorage, Shape)> {
    let x = slice::<T>(s, l)?;
    let n = row_len(l)?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        out.extend(row.iter().map(|v| T::from_f64((v.to_f64() - mean) * inv)));
    }
    Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
}

/// `dx = (g - mean(g) - y·mean(g·y)) / σ`.
fn row_norm_bwd<T: WithDType>(arg: &Tensor, res: &Tensor, grad: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let n = *arg.dims().last().unwrap();
    let (x, y, g) = (host::<T>(arg)?, host::<T>(res)?, host::<T>(grad)?);
    let mut out = Vec::with_capacity(x.len());
    for ((xr, yr), gr) in x.chunks(n).zip(y.chunks(n)).zip(g.chunks(n)) {
        let mean = xr.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let g_mean = gr.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
        let gy_mean = gr.iter().zip(yr).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>() / n as f64;
        out.extend(
            gr.iter()
                .zip(yr)
                .map(|(a, b)| T::from_f64((a.to_f64() - g_mean - b.to_f64() * gy_mean) * inv)),
        );
    }
    Tensor::from_vec(out, arg.shape(), arg.device())
}

impl CustomOp1 for RowNorm {
    fn name(&self) -> &'static str {
        "row-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, row_norm_fwd(s, l, self.eps))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(dispatch_dtype!(arg.dtype(), row_norm_bwd(arg, res, grad, self.eps))?))
    }
}

/// Zero-mean, unit-variance normalisation of every vector along the last
/// axis.
pub fn row_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(RowNorm { eps })?)
}

// Softmax over the last axis, optionally restricted by a 0/1 mask.

fn softmax_rows<T: WithDType>(x: &[T], n: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (r, row) in x.chunks(n).enumerate() {
        let keep = |c: usize| mask.is_none_or(|m| m[r * n + c]);
        let max = (0..n)
            .filter(|&c| keep(c))
            .map(|c| row[c].to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..n)
            .map(|c| if keep(c) { (row[c].to_f64() - max).exp() } else { 0.0 })
            .collect();
        let sum: f64 = e.iter().sum();
        let inv = if sum > 0.0 { 1.0 / sum } else { 0.0 };
        out.extend(e.iter().map(|v| T::from_f64(v * inv)));
    }
    out
}

/// `dx = y·(g - Σ g·y)`.
fn softmax_bwd<T: WithDType>(res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
    let n = *res.dims().last().unwrap();
    let (y, g) = (host::<T>(res)?, host::<T>(grad)?);
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
        out.extend(yr.iter().zip(gr).map(|(a, b)| T::from_f64(a.to_f64() * (b.to_f64() - dot))));
    }
    Tensor::from_vec(out, res.shape(), res.device())
}

struct Softmax;

fn softmax_fwd<T: WithDType>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let n = row_len(l)?;
    let out = softmax_rows(slice::<T>(s, l)?, n, None);
    Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, softmax_fwd(s, l))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(dispatch_dtype!(res.dtype(), softmax_bwd(res, grad))?))
    }
}

struct MaskedSoftmax;

fn mask_values<T: WithDType>(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<bool>> {
    Ok(slice::<T>(s, l)?.iter().map(|v| v.to_f64() != 0.0).collect())
}

fn masked_softmax_fwd<T: WithDType>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    if l1.dims() != l2.dims() {
        candle_core::bail!("mask {:?} does not match logits {:?}", l2.dims(), l1.dims());
    }
    let n = row_len(l1)?;
    let mask = mask_values::<T>(s2, l2)?;
    let out = softmax_rows(slice::<T>(s1, l1)?, n, Some(&mask));
    Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
}

impl CustomOp2 for MaskedSoftmax {
    fn name(&self) -> &'static str {
        "masked-softmax"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s1, masked_softmax_fwd(s1, l1, s2, l2))
    }

    fn bwd(
        &self,
        _logits: &Tensor,
        _mask: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(dispatch_dtype!(res.dtype(), softmax_bwd(res, grad))?), None))
    }
}

/// Softmax along the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softmax)?)
}

/// Softmax along the last axis over entries where `mask` is non-zero; rows
/// without such entries give zeros. `mask` may be broadcast to `logits`.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mask = mask.broadcast_as(logits.shape())?.to_dtype(logits.dtype())?.contiguous()?;
    Ok(logits.contiguous()?.apply_op2(&mask, MaskedSoftmax)?)
}

// GELU with the exact error function.

struct Gelu;

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

fn gelu_fwd<T: WithDType>(s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let out = slice::<T>(s, l)?
        .iter()
        .map(|v| {
            let x = v.to_f64();
            T::from_f64(0.5 * x * (1.0 + erf_f64(x * SQRT_HALF)))
        })
        .collect();
    Ok((T::to_cpu_storage_owned(out), l.shape().clone()))
}

fn gelu_bwd<T: WithDType>(arg: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
    let density = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let (x, g) = (host::<T>(arg)?, host::<T>(grad)?);
    let out = x
        .iter()
        .zip(&g)
        .map(|(a, b)| {
            let x = a.to_f64();
            let d = 0.5 * (1.0 + erf_f64(x * SQRT_HALF)) + x * density * (-0.5 * x * x).exp();
            T::from_f64(d * b.to_f64())
        })
        .collect();
    Tensor::from_vec(out, arg.shape(), arg.device())
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch!(s, gelu_fwd(s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(dispatch_dtype!(arg.dtype(), gelu_bwd(arg, grad))?))
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}
