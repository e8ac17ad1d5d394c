//! Forward primitives: direct convolution, batch normalization, elementwise
//! ops and the per-pixel channel softmax.
//!
//! Every op is a pure function. Convolution parallelizes over output
//! channels; each output element is accumulated in a fixed order
//! (bias, then input channel, kernel row, kernel column) so results do not
//! depend on the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Plain 2D convolution weights, `[out_ch, in_ch, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvSpec {
    pub fn new(
        weights: Tensor,
        bias: Option<Tensor>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (out_ch, _, kh, kw) = weights.dims4()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::arg(format!("kernel {kh}x{kw} must have odd extents")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        if let Some(b) = &bias {
            if b.shape() != [out_ch] {
                return Err(Error::dim(format!(
                    "bias shape {:?} does not match out_ch {out_ch}",
                    b.shape()
                )));
            }
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// Square `k x k` conv at stride 1 with "same" padding.
    pub fn same(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (_, _, kh, kw) = weights.dims4()?;
        Self::new(weights, bias, (1, 1), (kh / 2, kw / 2))
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn bias_at(&self, oc: usize) -> f32 {
        self.bias.as_ref().map_or(0.0, |b| b.data()[oc])
    }

    /// Output spatial extents for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let oh = out_extent(h, kh, self.stride.0, self.padding.0);
        let ow = out_extent(w, kw, self.stride.1, self.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::InvalidGeometry(format!(
                "{kh}x{kw} kernel with padding {:?} does not fit a {h}x{w} input",
                self.padding
            ))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|span| span / stride + 1)
}

/// Inference-time batch normalization statistics and affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec {
    pub mean: Tensor,
    pub var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl BatchNormSpec {
    pub fn new(mean: Tensor, var: Tensor, gamma: Tensor, beta: Tensor, eps: f32) -> Result<Self> {
        let c = mean.len();
        for (name, t) in [("mean", &mean), ("var", &var), ("gamma", &gamma), ("beta", &beta)] {
            if t.shape() != [c] {
                return Err(Error::dim(format!(
                    "batchnorm {name} has shape {:?}, expected [{c}]",
                    t.shape()
                )));
            }
        }
        if var.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::arg("batchnorm variance must be non-negative"));
        }
        if !(eps >= 0.0) {
            return Err(Error::arg("batchnorm eps must be non-negative"));
        }
        Ok(Self {
            mean,
            var,
            gamma,
            beta,
            eps,
        })
    }

    /// mean 0, var 1, gamma 1, beta 0, eps 0.
    pub fn identity(channels: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[channels])?,
            Tensor::full(&[channels], 1.0)?,
            Tensor::full(&[channels], 1.0)?,
            Tensor::zeros(&[channels])?,
            0.0,
        )
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale * x + shift`.
    pub fn scale_shift(&self, c: usize) -> (f32, f32) {
        let std = (self.var.data()[c] + self.eps).sqrt();
        let scale = self.gamma.data()[c] / std;
        (scale, self.beta.data()[c] - self.mean.data()[c] * scale)
    }
}

/// Direct cross-correlation with zero padding. Input `[C_in, H, W]`.
pub fn conv2d_forward(input: &Tensor, conv: &ConvSpec) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3()?;
    if c_in != conv.in_channels() {
        return Err(Error::dim(format!(
            "conv expects {} input channels, input has {c_in}",
            conv.in_channels()
        )));
    }
    let (oh, ow) = conv.output_size(h, w)?;
    let c_out = conv.out_channels();
    let (kh, kw) = conv.kernel();
    let (sh, sw) = conv.stride;
    let (ph, pw) = (conv.padding.0 as isize, conv.padding.1 as isize);
    let x = input.data();
    let wt = conv.weights.data();
    let plane = oh * ow;

    let mut out = vec![0f32; c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(oc, dst)| {
        dst.fill(conv.bias_at(oc));
        for ic in 0..c_in {
            let src = &x[ic * h * w..(ic + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let wv = wt[((oc * c_in + ic) * kh + ki) * kw + kj];
                    let dx = kj as isize - pw;
                    // ox range for which 0 <= ox*sw + dx < w
                    let lo = if dx < 0 {
                        ((-dx) as usize).div_ceil(sw)
                    } else {
                        0
                    };
                    let hi_excl = w as isize - dx;
                    if hi_excl <= 0 {
                        continue;
                    }
                    let hi = (hi_excl as usize).div_ceil(sw).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * sh) as isize + ki as isize - ph;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if sw == 1 {
                            let start = (lo as isize + dx) as usize;
                            let srow = &row[start..start + (hi - lo)];
                            for (d, &s) in drow[lo..hi].iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                                *d += wv * row[((ox * sw) as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![c_out, oh, ow], out)
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub fn batchnorm_forward(input: &Tensor, bn: &BatchNormSpec) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if c != bn.channels() {
        return Err(Error::dim(format!(
            "batchnorm has {} channels, input has {c}",
            bn.channels()
        )));
    }
    let plane = h * w;
    let mut out = input.data().to_vec();
    for (ch, chunk) in out.chunks_mut(plane).enumerate() {
        let mean = bn.mean.data()[ch];
        let std = (bn.var.data()[ch] + bn.eps).sqrt();
        let gamma = bn.gamma.data()[ch];
        let beta = bn.beta.data()[ch];
        for v in chunk {
            *v = gamma * ((*v - mean) / std) + beta;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_same_shape(b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|x| x.max(0.0))
}

/// Softmax over axis 0 of a `[D, H, W]` tensor, independently per pixel.
pub fn softmax_channel(a: &Tensor) -> Result<Tensor> {
    let (d, h, w) = a.dims3()?;
    let x = a.data();
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at flat index {i}")));
    }
    let plane = h * w;
    let mut out = vec![0f32; x.len()];
    for p in 0..plane {
        let max = (0..d).map(|k| x[k * plane + p]).fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0f32;
        for k in 0..d {
            let e = (x[k * plane + p] - max).exp();
            out[k * plane + p] = e;
            total += e;
        }
        for k in 0..d {
            out[k * plane + p] /= total;
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// conv3x3-BN-relu-conv3x3-BN, plus the input, then relu.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvSpec,
    pub bn1: BatchNormSpec,
    pub conv2: ConvSpec,
    pub bn2: BatchNormSpec,
}

impl ResidualBlock {
    pub fn new(
        conv1: ConvSpec,
        bn1: BatchNormSpec,
        conv2: ConvSpec,
        bn2: BatchNormSpec,
    ) -> Result<Self> {
        let c = conv1.in_channels();
        let chain_ok = conv1.out_channels() == bn1.channels()
            && conv2.in_channels() == conv1.out_channels()
            && conv2.out_channels() == c
            && bn2.channels() == c;
        if !chain_ok {
            return Err(Error::dim(format!(
                "residual block channel chain broken (in {c}, conv1 {}->{}, conv2 {}->{})",
                conv1.in_channels(),
                conv1.out_channels(),
                conv2.in_channels(),
                conv2.out_channels()
            )));
        }
        for conv in [&conv1, &conv2] {
            let (kh, kw) = conv.kernel();
            if conv.stride != (1, 1) || conv.padding != (kh / 2, kw / 2) {
                return Err(Error::InvalidGeometry(
                    "residual convs must preserve spatial extent".into(),
                ));
            }
        }
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
        })
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_forward(x, &self.conv1)?;
        let y = relu(&batchnorm_forward(&y, &self.bn1)?);
        let y = conv2d_forward(&y, &self.conv2)?;
        let y = batchnorm_forward(&y, &self.bn2)?;
        Ok(relu(&add(&y, x)?))
    }
}
