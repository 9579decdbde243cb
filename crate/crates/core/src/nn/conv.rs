//! 2D convolution as an im2col + gemm custom op.
//!
//! candle's CPU convolution backward goes through a direct transposed
//! convolution which dominates a training step on small machines. This op
//! keeps the forward and both backward products inside gemm and only does the
//! (cheap) im2col / col2im reshuffles by hand.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor};
use std::ops::AddAssign;

use crate::Result;

pub(crate) trait Scalar: Copy + Default + AddAssign + Send + Sync + 'static {
    const ONE: Self;
}

impl Scalar for f32 {
    const ONE: Self = 1.0;
}

impl Scalar for f64 {
    const ONE: Self = 1.0;
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (batch, c_in, h, w) = match input {
            &[b, c, h, w] => (b, c, h, w),
            _ => candle_core::bail!("conv2d expects a rank-4 input, got {input:?}"),
        };
        let (c_out, wc, kh, kw) = match weight {
            &[o, c, kh, kw] => (o, c, kh, kw),
            _ => candle_core::bail!("conv2d expects a rank-4 kernel, got {weight:?}"),
        };
        if wc != c_in {
            candle_core::bail!("conv2d channel mismatch: input {c_in}, kernel {wc}");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            candle_core::bail!("conv2d kernel larger than padded input");
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn n(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose input column `oj * stride + tap - pad`
    /// lies inside the image.
    fn valid_cols(&self, tap: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(tap).div_ceil(self.stride);
        let hi = if self.w + self.pad > tap {
            ((self.w + self.pad - tap - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Visits every in-bounds run of taps of one image as (offset of the run
    /// in the column matrix, offset of its first input pixel, run length).
    /// Consecutive taps of a run are `stride` input pixels apart.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.n();
        for c in 0..self.c_in {
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (c * self.kh + a) * self.kw + b;
                    let (lo, hi) = self.valid_cols(b);
                    if lo == hi {
                        continue;
                    }
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + a) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = (c * self.h + ii as usize) * self.w + lo * self.stride + b - self.pad;
                        f(row * n + oi * self.wo + lo, src, hi - lo);
                    }
                }
            }
        }
    }

    /// Out-of-bounds taps are left untouched; they are the same for every
    /// image, so a zeroed buffer stays valid across a batch.
    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let stride = self.stride;
        self.for_each_run(|dst, src, len| {
            let out = &mut cols[dst..dst + len];
            if stride == 1 {
                out.copy_from_slice(&image[src..src + len]);
            } else {
                for (o, v) in out.iter_mut().zip(image[src..].iter().step_by(stride)) {
                    *o = *v;
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let stride = self.stride;
        self.for_each_run(|src, dst, len| {
            let run = &cols[src..src + len];
            if stride == 1 {
                for (o, v) in image[dst..dst + len].iter_mut().zip(run) {
                    *o += *v;
                }
            } else {
                for (o, v) in image[dst..].iter_mut().step_by(stride).zip(run) {
                    *o += *v;
                }
            }
        });
    }
}

/// Row-major dense product `dst (m×n) [+]= lhs · rhs` where either operand
/// may be read transposed.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Scalar>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    lhs: &[T],
    lhs_t: bool,
    rhs: &[T],
    rhs_t: bool,
) {
    debug_assert_eq!(dst.len(), m * n);
    debug_assert_eq!(lhs.len(), m * k);
    debug_assert_eq!(rhs.len(), k * n);
    let (lhs_cs, lhs_rs) = if lhs_t { (m as isize, 1) } else { (1, k as isize) };
    let (rhs_cs, rhs_rs) = if rhs_t { (k as isize, 1) } else { (1, n as isize) };
    // SAFETY: the slices are sized for the given dimensions and strides (checked
    // above in debug builds, guaranteed by the callers' geometry).
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs,
            lhs_rs,
            rhs.as_ptr(),
            rhs_cs,
            rhs_rs,
            T::ONE,
            T::ONE,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

fn forward<T: Scalar>(g: &Geometry, input: &[T], weight: &[T]) -> Vec<T> {
    let (k, n) = (g.k(), g.n());
    let mut out = vec![T::default(); g.batch * g.c_out * n];
    let mut cols = vec![T::default(); k * n];
    let in_stride = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        g.im2col(&input[b * in_stride..(b + 1) * in_stride], &mut cols);
        let dst = &mut out[b * g.c_out * n..(b + 1) * g.c_out * n];
        matmul(g.c_out, n, k, dst, false, weight, false, &cols, false);
    }
    out
}

/// Weight gradient, and the input gradient when `input_grad` is set.
fn backward<T: Scalar>(
    g: &Geometry,
    input: &[T],
    weight: &[T],
    grad: &[T],
    input_grad: bool,
) -> (Option<Vec<T>>, Vec<T>) {
    let (k, n) = (g.k(), g.n());
    let in_stride = g.c_in * g.h * g.w;
    let mut grad_in = input_grad.then(|| vec![T::default(); input.len()]);
    let mut grad_w = vec![T::default(); weight.len()];
    let mut cols = vec![T::default(); k * n];
    let mut grad_cols = if input_grad { vec![T::default(); k * n] } else { Vec::new() };
    for b in 0..g.batch {
        let gy = &grad[b * g.c_out * n..(b + 1) * g.c_out * n];
        g.im2col(&input[b * in_stride..(b + 1) * in_stride], &mut cols);
        // dW += dY · colsᵀ
        matmul(g.c_out, k, n, &mut grad_w, b > 0, gy, false, &cols, true);
        if let Some(grad_in) = grad_in.as_mut() {
            // dcols = Wᵀ · dY
            matmul(k, n, g.c_out, &mut grad_cols, false, weight, true, gy, false);
            g.col2im(&grad_cols, &mut grad_in[b * in_stride..(b + 1) * in_stride]);
        }
    }
    (grad_in, grad_w)
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d op requires contiguous operands"),
    }
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let shape = Shape::from((g.batch, g.c_out, g.ho, g.wo));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(forward(
                &g,
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(forward(
                &g,
                contiguous_slice(x, l1)?,
                contiguous_slice(w, l2)?,
            )),
            _ => candle_core::bail!("conv2d op supports matching f32 or f64 operands"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        input: &Tensor,
        weight: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(input.dims(), weight.dims(), self.stride, self.pad)?;
        let dev = input.device();
        // Inputs that neither are parameters nor derive from one (the image) get no gradient.
        let input_grad = input.track_op();
        macro_rules! run {
            ($t:ty) => {{
                let (a, b) = backward(
                    &g,
                    &input.flatten_all()?.to_vec1::<$t>()?,
                    &weight.flatten_all()?.to_vec1::<$t>()?,
                    &grad.flatten_all()?.to_vec1::<$t>()?,
                    input_grad,
                );
                let a = a.map(|a| Tensor::from_vec(a, input.shape(), dev)).transpose()?;
                (a, Tensor::from_vec(b, weight.shape(), dev)?)
            }};
        }
        let (gi, gw) = match input.dtype() {
            DType::F32 => run!(f32),
            DType::F64 => run!(f64),
            dt => candle_core::bail!("conv2d op does not support {dt:?}"),
        };
        Ok((gi, Some(gw)))
    }
}

/// Zero-padded 2D convolution without bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let input = input.contiguous()?;
    let weight = weight.contiguous()?;
    Ok(input.apply_op2(&weight, Conv2dOp { stride, pad })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn naive(input: &[f64], weight: &[f64], g: &Geometry) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.c_out * g.ho * g.wo];
        for b in 0..g.batch {
            for o in 0..g.c_out {
                for oi in 0..g.ho {
                    for oj in 0..g.wo {
                        let mut acc = 0.0;
                        for c in 0..g.c_in {
                            for a in 0..g.kh {
                                for bb in 0..g.kw {
                                    let ii = (oi * g.stride + a) as isize - g.pad as isize;
                                    let jj = (oj * g.stride + bb) as isize - g.pad as isize;
                                    if ii < 0 || jj < 0 || ii >= g.h as isize || jj >= g.w as isize {
                                        continue;
                                    }
                                    let x = input[((b * g.c_in + c) * g.h + ii as usize) * g.w + jj as usize];
                                    let w = weight[((o * g.c_in + c) * g.kh + a) * g.kw + bb];
                                    acc += x * w;
                                }
                            }
                        }
                        out[((b * g.c_out + o) * g.ho + oi) * g.wo + oj] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_direct_convolution() {
        let cases = [(3, 1, 1, 5, 7), (3, 2, 1, 6, 9), (3, 2, 1, 6, 8), (3, 1, 0, 4, 4), (3, 2, 0, 7, 5), (1, 2, 0, 5, 6), (5, 1, 2, 4, 6)];
        for &(size, stride, pad, h, w) in &cases {
            let g = Geometry::new(&[2, 3, h, w], &[4, 3, size, size], stride, pad).unwrap();
            let x = pseudo(2 * 3 * h * w, 1);
            let k = pseudo(4 * 3 * size * size, 2);
            let want = naive(&x, &k, &g);
            let xt = Tensor::from_vec(x, (2, 3, h, w), &Device::Cpu).unwrap();
            let kt = Tensor::from_vec(k, (4, 3, size, size), &Device::Cpu).unwrap();
            let got = conv2d(&xt, &kt, stride, pad).unwrap();
            assert_eq!(got.dims(), &[2, 4, g.ho, g.wo]);
            let got = got.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let x0 = pseudo(2 * 5 * 6, 3);
        let k0 = pseudo(2 * 2 * 9, 4);
        let probe = Tensor::from_vec(pseudo(2 * 2 * 3 * 3, 5), (1, 2, 3, 3), &dev).unwrap();
        let loss = |x: &Tensor, k: &Tensor| {
            conv2d(x, k, 2, 1).unwrap().mul(&probe).unwrap().sum_all().unwrap()
        };
        let x = Var::from_vec(x0.clone(), (1, 2, 5, 6), &dev).unwrap();
        let k = Var::from_vec(k0.clone(), (2, 2, 3, 3), &dev).unwrap();
        let grads = loss(x.as_tensor(), k.as_tensor()).backward().unwrap();
        let gx = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let gk = grads.get(&k).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eval = |xs: &[f64], ks: &[f64]| {
            let xt = Tensor::from_vec(xs.to_vec(), (1, 2, 5, 6), &dev).unwrap();
            let kt = Tensor::from_vec(ks.to_vec(), (2, 2, 3, 3), &dev).unwrap();
            loss(&xt, &kt).to_scalar::<f64>().unwrap()
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let (mut p, mut m) = (x0.clone(), x0.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (eval(&p, &k0) - eval(&m, &k0)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7, "input {i}: {fd} vs {}", gx[i]);
        }
        for i in 0..k0.len() {
            let (mut p, mut m) = (k0.clone(), k0.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (eval(&x0, &p) - eval(&x0, &m)) / (2.0 * h);
            assert!((fd - gk[i]).abs() < 1e-7, "kernel {i}: {fd} vs {}", gk[i]);
        }

        // A constant input gets no gradient and leaves the kernel gradient unchanged.
        let xt = Tensor::from_vec(x0, (1, 2, 5, 6), &dev).unwrap();
        let grads = loss(&xt, k.as_tensor()).backward().unwrap();
        assert!(grads.get(&xt).is_none());
        let gk_const = grads.get(&k).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gk_const, gk);
    }
}
