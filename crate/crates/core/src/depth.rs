//! Fully convolutional depth head conditioned on camera parameters.
//!
//! The 25-value camera encoding (intrinsics, extrinsics, augmentation) is
//! broadcast over the feature grid, projected to the feature width by a
//! 1x1 conv and added to the image features. Two residual blocks and a
//! 1x1 logit conv follow; a per-pixel softmax yields the depth simplex.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{AugTransform, CameraExtrinsics, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::init;
use crate::lift_splat::DepthDistribution;
use crate::ops::{add, conv2d_forward, ConvSpec, ResidualBlock};
use crate::store::TensorStore;
use crate::tensor::Tensor;

pub const CAMERA_ENCODING_LEN: usize = 25;

/// `[fx, fy, cx, cy, R (9, row-major), t (3), A (9, row-major)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParamEncoding(pub [f32; CAMERA_ENCODING_LEN]);

impl CameraParamEncoding {
    pub fn values(&self) -> &[f32; CAMERA_ENCODING_LEN] {
        &self.0
    }

    /// Positions of the augmentation entries inside the vector.
    pub const AUG_RANGE: std::ops::Range<usize> = 16..25;
}

pub fn encode_camera_params(
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    aug: &AugTransform,
) -> CameraParamEncoding {
    let mut v = [0f32; CAMERA_ENCODING_LEN];
    v[..4].copy_from_slice(&[intr.fx as f32, intr.fy as f32, intr.cx as f32, intr.cy as f32]);
    for r in 0..3 {
        for c in 0..3 {
            v[4 + r * 3 + c] = extr.rotation[(r, c)] as f32;
        }
    }
    for k in 0..3 {
        v[13 + k] = extr.translation[k] as f32;
    }
    for (dst, src) in v[16..].iter_mut().zip(aug.to_row_major()) {
        *dst = src as f32;
    }
    CameraParamEncoding(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthHeadWeights {
    pub param_proj: ConvSpec,
    pub trunk: [ResidualBlock; 2],
    pub logits: ConvSpec,
}

impl DepthHeadWeights {
    pub fn new(param_proj: ConvSpec, trunk: [ResidualBlock; 2], logits: ConvSpec) -> Result<Self> {
        let c = param_proj.out_channels();
        let ok = param_proj.in_channels() == CAMERA_ENCODING_LEN
            && param_proj.kernel() == (1, 1)
            && logits.kernel() == (1, 1)
            && trunk.iter().all(|b| b.channels() == c)
            && logits.in_channels() == c;
        if !ok {
            return Err(Error::dim(format!(
                "depth head chain inconsistent: proj {}->{}, trunk {:?}, logits {}->{}",
                param_proj.in_channels(),
                c,
                trunk.iter().map(ResidualBlock::channels).collect::<Vec<_>>(),
                logits.in_channels(),
                logits.out_channels()
            )));
        }
        Ok(Self {
            param_proj,
            trunk,
            logits,
        })
    }

    /// Seeded uniform weights in `[-0.1, 0.1]`.
    pub fn random(channels: usize, bins: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = init::INIT_SCALE;
        Self::new(
            init::conv(&mut rng, CAMERA_ENCODING_LEN, channels, 1, 1, s)?,
            [
                init::residual_block(&mut rng, channels, s)?,
                init::residual_block(&mut rng, channels, s)?,
            ],
            init::conv(&mut rng, channels, bins, 1, 1, s)?,
        )
    }

    /// All-zero convs: the head passes features through its trunk and
    /// predicts a uniform distribution.
    pub fn zero(channels: usize, bins: usize) -> Result<Self> {
        Self::new(
            init::zero_conv(CAMERA_ENCODING_LEN, channels, 1, 1)?,
            [init::zero_residual_block(channels)?, init::zero_residual_block(channels)?],
            init::zero_conv(channels, bins, 1, 1)?,
        )
    }

    pub fn channels(&self) -> usize {
        self.param_proj.out_channels()
    }

    pub fn bins(&self) -> usize {
        self.logits.out_channels()
    }

    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        s.insert_conv("param_proj", &self.param_proj);
        for (i, b) in self.trunk.iter().enumerate() {
            s.insert_conv(&format!("trunk.{i}.conv1"), &b.conv1);
            s.insert_bn(&format!("trunk.{i}.bn1"), &b.bn1);
            s.insert_conv(&format!("trunk.{i}.conv2"), &b.conv2);
            s.insert_bn(&format!("trunk.{i}.bn2"), &b.bn2);
        }
        s.insert_conv("logits", &self.logits);
        s
    }

    pub fn from_store(s: &TensorStore) -> Result<Self> {
        let block = |i: usize| {
            ResidualBlock::new(
                s.conv(&format!("trunk.{i}.conv1"), 1)?,
                s.bn(&format!("trunk.{i}.bn1"))?,
                s.conv(&format!("trunk.{i}.conv2"), 1)?,
                s.bn(&format!("trunk.{i}.bn2"))?,
            )
        };
        Self::new(s.conv("param_proj", 1)?, [block(0)?, block(1)?], s.conv("logits", 1)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.to_store().save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&TensorStore::load(dir)?)
    }
}

/// Raw depth logits `[bins, h, w]`.
pub fn depth_head_logits(
    features: &Tensor,
    enc: &CameraParamEncoding,
    wts: &DepthHeadWeights,
) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    if c != wts.channels() {
        return Err(Error::dim(format!(
            "depth head expects {} feature channels, got {c}",
            wts.channels()
        )));
    }
    let plane = h * w;
    let mut param_map = Vec::with_capacity(CAMERA_ENCODING_LEN * plane);
    for &v in enc.values() {
        param_map.extend(std::iter::repeat_n(v, plane));
    }
    let param_map = Tensor::new(vec![CAMERA_ENCODING_LEN, h, w], param_map)?;
    let mut x = add(features, &conv2d_forward(&param_map, &wts.param_proj)?)?;
    for block in &wts.trunk {
        x = block.forward(&x)?;
    }
    conv2d_forward(&x, &wts.logits)
}

pub fn depth_head_forward(
    features: &Tensor,
    enc: &CameraParamEncoding,
    wts: &DepthHeadWeights,
) -> Result<DepthDistribution> {
    DepthDistribution::from_logits(&depth_head_logits(features, enc, wts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{compose_aug, CameraRig};
    use rand::Rng;

    fn enc_for(aug: &AugTransform) -> CameraParamEncoding {
        let rig = CameraRig::reference(176, 64);
        let c = &rig.cameras()[0];
        encode_camera_params(&c.intrinsics, &c.extrinsics, aug)
    }

    #[test]
    fn encoding_layout() {
        let intr = CameraIntrinsics::new(500.0, 500.0, 352.0, 128.0).unwrap();
        let e = encode_camera_params(&intr, &CameraExtrinsics::identity(), &AugTransform::identity());
        assert_eq!(&e.values()[..10], &[500., 500., 352., 128., 1., 0., 0., 0., 1., 0.]);
        assert_eq!(&e.values()[16..], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let again = encode_camera_params(&intr, &CameraExtrinsics::identity(), &AugTransform::identity());
        assert_eq!(e, again);
        let rig = CameraRig::reference(176, 64);
        let a = &rig.cameras()[0];
        let b = &rig.cameras()[1];
        assert_ne!(
            encode_camera_params(&a.intrinsics, &a.extrinsics, &AugTransform::identity()),
            encode_camera_params(&b.intrinsics, &b.extrinsics, &AugTransform::identity())
        );
    }

    #[test]
    fn output_is_simplex_for_random_weights() {
        let wts = DepthHeadWeights::random(6, 10, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = init::uniform(&mut rng, &[6, 5, 7], 3.0).unwrap();
        let d = depth_head_forward(&f, &enc_for(&AugTransform::identity()), &wts).unwrap();
        // DepthDistribution::new re-validates the simplex
        DepthDistribution::new(d.into_tensor()).unwrap();
    }

    #[test]
    fn zero_logits_give_uniform() {
        let mut wts = DepthHeadWeights::random(4, 8, 2).unwrap();
        wts.trunk = [init::zero_residual_block(4).unwrap(), init::zero_residual_block(4).unwrap()];
        wts.logits = init::zero_conv(4, 8, 1, 1).unwrap();
        let f = Tensor::full(&[4, 3, 3], 0.7).unwrap();
        let d = depth_head_forward(&f, &enc_for(&AugTransform::identity()), &wts).unwrap();
        assert!(d.tensor().data().iter().all(|&p| (p - 0.125).abs() < 1e-7));
    }

    #[test]
    fn augmentation_entries_affect_output() {
        let wts = DepthHeadWeights::random(4, 8, 9).unwrap();
        let f = Tensor::full(&[4, 3, 3], 0.2).unwrap();
        let base = depth_head_forward(&f, &enc_for(&AugTransform::identity()), &wts).unwrap();
        let aug = compose_aug(true, 0.5, (2.0, 1.0), 0.0, (176, 64)).unwrap();
        let moved = depth_head_forward(&f, &enc_for(&aug), &wts).unwrap();
        assert!(base.tensor().max_abs_diff(moved.tensor()).unwrap() > 1e-6);
    }

    #[test]
    fn translation_equivariance_in_interior() {
        let wts = DepthHeadWeights::random(3, 5, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (12, 12);
        let base: Vec<f32> = (0..3 * h * (w + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // two windows of the same wider map, offset by one column
        let window = |off: usize| {
            Tensor::from_fn(&[3, h, w], |k| {
                let (c, r) = (k / (h * w), k % (h * w));
                base[c * h * (w + 1) + (r / w) * (w + 1) + r % w + off]
            })
            .unwrap()
        };
        let enc = enc_for(&AugTransform::identity());
        let a = depth_head_forward(&window(0), &enc, &wts).unwrap();
        let b = depth_head_forward(&window(1), &enc, &wts).unwrap();
        // receptive field of the trunk is 9x9, so crop 4 cells
        let margin = 4;
        for d in 0..5 {
            for i in margin..h - margin {
                for j in margin..w - margin - 1 {
                    let va = a.tensor().data()[(d * h + i) * w + j + 1];
                    let vb = b.tensor().data()[(d * h + i) * w + j];
                    assert!((va - vb).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn weights_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let wts = DepthHeadWeights::random(3, 4, 1).unwrap();
        wts.save(dir.path()).unwrap();
        assert_eq!(DepthHeadWeights::load(dir.path()).unwrap(), wts);
    }

    #[test]
    fn channel_mismatch() {
        let wts = DepthHeadWeights::random(3, 4, 1).unwrap();
        let f = Tensor::zeros(&[2, 3, 3]).unwrap();
        assert!(depth_head_forward(&f, &enc_for(&AugTransform::identity()), &wts).is_err());
    }
}
