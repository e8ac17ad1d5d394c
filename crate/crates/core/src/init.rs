//! Deterministic synthetic weights.

use rand::Rng;

use crate::error::Result;
use crate::ops::{BatchNormSpec, ConvSpec, ResidualBlock};
use crate::tensor::Tensor;

/// Default half-width of the uniform init range.
pub const INIT_SCALE: f32 = 0.1;

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], half_width: f32) -> Result<Tensor> {
    Tensor::from_fn(shape, |_| rng.gen_range(-half_width..=half_width))
}

/// Random conv with "same" padding at the given stride.
pub fn conv<R: Rng>(
    rng: &mut R,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    half_width: f32,
) -> Result<ConvSpec> {
    ConvSpec::new(
        uniform(rng, &[out_ch, in_ch, k, k], half_width)?,
        Some(uniform(rng, &[out_ch], half_width)?),
        (stride, stride),
        (k / 2, k / 2),
    )
}

pub fn batchnorm<R: Rng>(rng: &mut R, channels: usize) -> Result<BatchNormSpec> {
    BatchNormSpec::new(
        uniform(rng, &[channels], 0.5)?,
        Tensor::from_fn(&[channels], |_| rng.gen_range(0.5..2.0))?,
        Tensor::from_fn(&[channels], |_| rng.gen_range(0.5..1.5))?,
        uniform(rng, &[channels], 0.5)?,
        1e-5,
    )
}

/// Zero-weight `k x k` "same" conv with zero bias.
pub fn zero_conv(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Result<ConvSpec> {
    ConvSpec::new(
        Tensor::zeros(&[out_ch, in_ch, k, k])?,
        Some(Tensor::zeros(&[out_ch])?),
        (stride, stride),
        (k / 2, k / 2),
    )
}

/// Center-tap conv copying input channel `c` to output channel `c` for
/// `c < min(in_ch, out_ch)`, scaled by `gain`.
pub fn center_tap_conv(
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    gain: f32,
) -> Result<ConvSpec> {
    let mut w = Tensor::zeros(&[out_ch, in_ch, k, k])?;
    let center = k / 2;
    for c in 0..in_ch.min(out_ch) {
        w.data_mut()[((c * in_ch + c) * k + center) * k + center] = gain;
    }
    ConvSpec::new(w, None, (stride, stride), (k / 2, k / 2))
}

pub fn residual_block<R: Rng>(rng: &mut R, channels: usize, half_width: f32) -> Result<ResidualBlock> {
    ResidualBlock::new(
        conv(rng, channels, channels, 3, 1, half_width)?,
        batchnorm(rng, channels)?,
        conv(rng, channels, channels, 3, 1, half_width)?,
        batchnorm(rng, channels)?,
    )
}

/// Residual block whose convs are all zero: `forward(x) = relu(x + bn2(0))`.
pub fn zero_residual_block(channels: usize) -> Result<ResidualBlock> {
    ResidualBlock::new(
        zero_conv(channels, channels, 3, 1)?,
        BatchNormSpec::identity(channels)?,
        zero_conv(channels, channels, 3, 1)?,
        BatchNormSpec::identity(channels)?,
    )
}
