//! Siamese residual CNN producing 1/4 and 1/8 resolution feature maps.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::nn::{conv2d, instance_norm2d, to_f32_vec, Init, Scope};
use crate::{Error, Result};

/// Images are padded on the right and bottom to a multiple of this.
pub const PAD_MULTIPLE: usize = 8;
pub const MIN_IMAGE_SIDE: usize = 32;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias. Convolutions followed by instance
    /// normalisation have no bias since the mean subtraction removes it.
    pub fn new(
        scope: &mut Scope<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        Ok(Self {
            weight: scope.param("weight", &[c_out, c_in, kernel, kernel], Init::Normal((2.0 / fan_in).sqrt()))?,
            bias: if bias { Some(scope.param("bias", &[c_out], Init::Zeros)?) } else { None },
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        match &self.bias {
            Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, bias.dims()[0], 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResidualBlock {
    fn new(scope: &mut Scope<'_>, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let skip = if stride != 1 || c_in != c_out {
            Some(Conv2d::new(&mut scope.sub("skip"), c_in, c_out, 1, stride, false)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut scope.sub("conv1"), c_in, c_out, 3, stride, false)?,
            conv2: Conv2d::new(&mut scope.sub("conv2"), c_out, c_out, 3, 1, false)?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = instance_norm2d(&self.conv1.forward(x)?)?.relu()?;
        let y = instance_norm2d(&self.conv2.forward(&y)?)?;
        let s = match &self.skip {
            Some(c) => instance_norm2d(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + s)?.relu()?)
    }
}

/// Original and padded image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl Padding {
    pub fn for_size(height: usize, width: usize) -> Self {
        let up = |v: usize| v.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        Self {
            height,
            width,
            padded_height: up(height),
            padded_width: up(width),
        }
    }
}

/// Left and right features at both levels, `(B, C, h, w)` each.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub coarse_left: Tensor,
    pub coarse_right: Tensor,
    pub fine_left: Tensor,
    pub fine_right: Tensor,
    pub padding: Padding,
}

impl FeaturePyramid {
    pub fn coarse_size(&self) -> (usize, usize) {
        let d = self.coarse_left.dims();
        (d[2], d[3])
    }

    pub fn fine_size(&self) -> (usize, usize) {
        let d = self.fine_left.dims();
        (d[2], d[3])
    }
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stem: Conv2d,
    blocks: Vec<ResidualBlock>,
    projection: Conv2d,
}

impl FeatureExtractor {
    pub fn new(scope: &mut Scope<'_>, cfg: &ModelConfig) -> Result<Self> {
        let stem = Conv2d::new(&mut scope.sub("stem"), 3, cfg.stem_channels, 3, 2, false)?;
        let mut blocks = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (i, (&c, stride)) in cfg.block_channels.iter().zip([1, 2, 1]).enumerate() {
            blocks.push(ResidualBlock::new(&mut scope.sub(format!("block{i}")), c_in, c, stride)?);
            c_in = c;
        }
        let projection = Conv2d::new(&mut scope.sub("projection"), c_in, cfg.feature_channels, 1, 1, true)?;
        Ok(Self { stem, blocks, projection })
    }

    /// Runs both views through the shared network as one batch. Inputs are
    /// `(B, 3, H, W)` with values in `[0, 1]`.
    pub fn extract(&self, left: &Tensor, right: &Tensor) -> Result<FeaturePyramid> {
        let (b, c, h, w) = left.dims4()?;
        if right.dims() != left.dims() {
            return Err(Error::Shape(format!(
                "left {:?} and right {:?} views differ",
                left.dims(),
                right.dims()
            )));
        }
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 colour channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        for (name, t) in [("left image", left), ("right image", right)] {
            if to_f32_vec(t)?.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        let padding = Padding::for_size(h, w);
        let both = Tensor::cat(&[left, right], 0)?;
        let both = replicate_pad(&both, padding)?;
        let x = ((both * 2.0)? - 1.0)?;

        let mut x = instance_norm2d(&self.stem.forward(&x)?)?.relu()?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let fine = self.projection.forward(&x)?;
        let coarse = self.projection.forward(&x.avg_pool2d(2)?)?;
        Ok(FeaturePyramid {
            coarse_left: coarse.narrow(0, 0, b)?,
            coarse_right: coarse.narrow(0, b, b)?,
            fine_left: fine.narrow(0, 0, b)?,
            fine_right: fine.narrow(0, b, b)?,
            padding,
        })
    }
}

/// Extends a `(B, C, H, W)` image to the padded size by repeating its last
/// row and column.
pub fn replicate_pad(x: &Tensor, padding: Padding) -> Result<Tensor> {
    let mut x = x.clone();
    let extra_h = padding.padded_height - padding.height;
    let extra_w = padding.padded_width - padding.width;
    if extra_h > 0 {
        x = x.pad_with_same(D::Minus2, 0, extra_h)?;
    }
    if extra_w > 0 {
        x = x.pad_with_same(D::Minus1, 0, extra_w)?;
    }
    Ok(x)
}
