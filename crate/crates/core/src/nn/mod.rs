//! Parameter storage and the small set of layers the pipeline is built from.

mod conv;
mod fused;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

pub use conv::conv2d;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

/// Named, trainable parameters. Requesting an existing name returns the same
/// storage, which is how parameter sharing is expressed.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every stored parameter that has a counterpart in `values`.
    /// Missing or mis-shaped entries are reported, not skipped.
    pub fn load(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Redraws every parameter uniformly in `[-bound, bound]`.
    pub fn randomize(&mut self, bound: f64) -> Result<()> {
        for var in self.vars.values() {
            let n = var.elem_count();
            let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
            var.set(&Tensor::from_vec(data, var.dims(), &self.device)?.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Replaces one parameter's value in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    fn get_or_init(&mut self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} requested as {shape:?} but exists as {:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * s
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

/// A name prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.get_or_init(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

/// Applies `f` to `x` viewed as a matrix whose rows are the last axis.
fn on_rows(x: &Tensor, out_dim: usize, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| Error::Shape("scalar input to a linear layer".into()))?;
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = f(&x.reshape((rows, last))?)?;
    let mut out = dims;
    *out.last_mut().unwrap() = out_dim;
    Ok(y.reshape(out)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Uniform fan-in initialisation.
    pub fn new(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: scope.param("weight", &[d_out, d_in], Init::Uniform(bound))?,
            bias: Some(scope.param("bias", &[d_out], Init::Uniform(bound))?),
        })
    }

    pub fn no_bias(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: scope.param("weight", &[d_out, d_in], Init::Uniform(bound))?,
            bias: None,
        })
    }

    /// Zero weight and bias: the layer initially outputs zeros.
    pub fn zeros(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.param("weight", &[d_out, d_in], Init::Zeros)?,
            bias: Some(scope.param("bias", &[d_out], Init::Zeros)?),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        on_rows(x, self.out_dim(), |m| {
            let y = m.matmul(&self.weight.t()?)?;
            Ok(match &self.bias {
                Some(b) => y.broadcast_add(b)?,
                None => y,
            })
        })
    }
}

/// Layer normalisation over the last axis with a learned affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[dim], Init::Const(1.0))?,
            beta: scope.param("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        channel_norm(x)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
            .map_err(Into::into)
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Normalises every vector along its last axis to zero mean and unit
/// variance. This is instance normalisation for a single feature vector.
pub fn channel_norm(x: &Tensor) -> Result<Tensor> {
    fused::row_norm(x, NORM_EPS)
}

/// Instance normalisation of a `(B, C, H, W)` map over its spatial axes.
pub fn instance_norm2d(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    Ok(channel_norm(&flat)?.reshape((b, c, h, w))?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    fused::gelu(x)
}

/// Two linear layers with a GELU in between; optionally the hidden layer is
/// normalised per vector before the activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    normalize_hidden: bool,
}

impl Mlp {
    pub fn new(scope: &mut Scope<'_>, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut scope.sub("fc1"), d_in, hidden)?,
            fc2: Linear::new(&mut scope.sub("fc2"), hidden, d_out)?,
            normalize_hidden: false,
        })
    }

    /// An MLP whose output layer starts at zero, so a residual branch built on
    /// it is initially the identity.
    pub fn zero_out(scope: &mut Scope<'_>, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut scope.sub("fc1"), d_in, hidden)?,
            fc2: Linear::zeros(&mut scope.sub("fc2"), hidden, d_out)?,
            normalize_hidden: false,
        })
    }

    pub fn normalizing(scope: &mut Scope<'_>, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            normalize_hidden: true,
            ..Self::new(scope, d_in, hidden, d_out)?
        })
    }

    pub fn fc1(&self) -> &Linear {
        &self.fc1
    }

    pub fn fc2(&self) -> &Linear {
        &self.fc2
    }

    pub fn normalizes_hidden(&self) -> bool {
        self.normalize_hidden
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.fc1.forward(x)?;
        if self.normalize_hidden {
            h = channel_norm(&h)?;
        }
        self.fc2.forward(&gelu(&h)?)
    }
}

/// Matrix product over broadcast leading dimensions of any rank. Both inputs
/// must have the same rank.
pub fn batched_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ad, bd) = (a.dims(), b.dims());
    let r = ad.len();
    if r < 2 || bd.len() != r || ad[r - 1] != bd[r - 2] {
        return Err(Error::Shape(format!("cannot multiply {ad:?} by {bd:?}")));
    }
    let lead: Vec<usize> = (0..r - 2).map(|i| ad[i].max(bd[i])).collect();
    let batch: usize = lead.iter().product();
    let (m, k, n) = (ad[r - 2], ad[r - 1], bd[r - 1]);
    let shape = |x: usize, y: usize| {
        let mut s = lead.clone();
        s.extend([x, y]);
        s
    };
    let a3 = a.broadcast_as(shape(m, k))?.contiguous()?.reshape((batch, m, k))?;
    let b3 = b.broadcast_as(shape(k, n))?.contiguous()?.reshape((batch, k, n))?;
    Ok(a3.matmul(&b3)?.reshape(shape(m, n))?)
}

/// Softmax along the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    fused::softmax(x)
}

/// Log-softmax along the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Softmax along an arbitrary axis.
pub fn softmax_dim(x: &Tensor, dim: usize) -> Result<Tensor> {
    let last = x.rank() - 1;
    if dim == last {
        return fused::softmax(x);
    }
    Ok(fused::softmax(&x.transpose(dim, last)?)?.transpose(dim, last)?)
}

/// Softmax along the last axis restricted to entries where `mask` (0/1,
/// broadcastable to `logits`) is one. Rows without any admissible entry
/// produce all-zero weights, so an empty neighbourhood yields a zero message.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    fused::masked_softmax(logits, mask)
}

/// Sinusoidal encoding of a scalar field: `(..)` → `(.., dim)` laid out as
/// `[sin(z·ω_0) .. sin(z·ω_{dim/2-1}), cos(z·ω_0) .. cos(z·ω_{dim/2-1})]`
/// with geometrically spaced frequencies `ω_i = 10000^(-2i/dim)`.
pub fn sinusoidal(z: &Tensor, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::InvalidArgument(format!("encoding width {dim} must be even and positive")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64))
        .collect();
    let freqs = Tensor::from_vec(freqs, half, z.device())?.to_dtype(z.dtype())?;
    let arg = z.unsqueeze(D::Minus1)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[arg.sin()?, arg.cos()?], D::Minus1)?)
}

/// Flattens a tensor into host memory as `f64`.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Flattens a tensor into host memory as `f32`.
pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

/// Builds a tensor of the requested dtype from host values.
pub fn tensor_from<S: Into<candle_core::Shape>>(
    data: Vec<f64>,
    shape: S,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Builds an index tensor.
pub fn index_tensor<S: Into<candle_core::Shape>>(data: Vec<u32>, shape: S, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, device)?)
}
