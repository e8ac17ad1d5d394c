//! End-to-end orchestration: backbone, view projection, depth, temporal
//! fusion, BEV encoder and detection head, in that order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{batchnorm_flops, block_flops, conv_flops, elementwise_flops, mask_views, CameraFeatures, FlopsReport};
use crate::camera::{AugTransform, CameraRig, DepthBinSpec};
use crate::depth::{depth_head_logits, encode_camera_params, CameraParamEncoding, DepthHeadWeights};
use crate::error::{Error, Result};
use crate::head::{circular_nms, decode, head_forward, Detection, HeadOutput, HeadWeights, LossWeights, NmsRadii, CLASS_NAMES};
use crate::init;
use crate::lift_splat::{fuse_depth, splat, BevGridSpec, DepthDistribution, FrustumGeometry, LookupTable};
use crate::ops::{batchnorm_forward, conv2d_forward, relu, BatchNormSpec, ConvSpec, ResidualBlock};
use crate::reparam::MergeBudget;
use crate::temporal::{align_and_concat, bev_encoder_forward, BevEncoderWeights, EgoPose, FrameBuffer};
use crate::tensor::Tensor;

pub const CONFIG_VERSION: u32 = 1;
pub const IMAGE_CHANNELS: usize = 3;
/// Backbone output stride: one stride-1 stage, then two stride-2 stages.
pub const FEATURE_STRIDE: usize = 4;
const BACKBONE_WIDTHS: [usize; 2] = [32, 48];
const BACKBONE_STRIDES: [usize; 3] = [1, 2, 2];

/// Heatmap logit of the identity-like head: `gain * mass + bias`.
pub const IDENTITY_HEAT_GAIN: f32 = 8.0;
pub const IDENTITY_HEAT_BIAS: f32 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsKind {
    /// Pass-through weights that carry image channel 0 to the heatmap.
    Identity,
    /// Seeded random weights.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConfig {
    pub window_seconds: f64,
    pub max_frames: usize,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            window_seconds: crate::temporal::DEFAULT_WINDOW_SECONDS,
            max_frames: crate::temporal::DEFAULT_MAX_FRAMES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub blocks: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: CLASS_NAMES.len(),
            blocks: 2,
        }
    }
}

/// Whole-pipeline configuration. Missing keys take the reference toy
/// values; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Rig file, relative to the config file. The reference rig is used
    /// when absent.
    pub rig: Option<PathBuf>,
    pub image_width: usize,
    pub image_height: usize,
    pub channels: usize,
    pub grid: BevGridSpec,
    pub bins: DepthBinSpec,
    /// Row-major 3x3 image augmentation.
    pub aug: Option<[f64; 9]>,
    pub depth_fusion_weight: f32,
    pub temporal: TemporalConfig,
    pub head: HeadConfig,
    pub loss_weights: LossWeights,
    pub nms_radii: NmsRadii,
    pub score_threshold: f32,
    pub top_k: usize,
    pub weights: WeightsKind,
    pub reparam_head: bool,
    pub merge_budget: MergeBudget,
    pub seed: u64,
    /// Precomputed table, relative to the config file.
    pub lut: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            rig: None,
            image_width: 176,
            image_height: 64,
            channels: 4,
            grid: BevGridSpec::default(),
            bins: DepthBinSpec::default(),
            aug: None,
            depth_fusion_weight: 0.5,
            temporal: TemporalConfig::default(),
            head: HeadConfig::default(),
            loss_weights: LossWeights::default(),
            nms_radii: NmsRadii::default(),
            score_threshold: 0.5,
            top_k: 100,
            weights: WeightsKind::Identity,
            reparam_head: true,
            merge_budget: MergeBudget::default(),
            seed: 0,
            lut: None,
        }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.image_width == 0
            || self.image_height == 0
            || !self.image_width.is_multiple_of(FEATURE_STRIDE)
            || !self.image_height.is_multiple_of(FEATURE_STRIDE)
        {
            return Err(Error::Config(format!(
                "image {}x{} must be a positive multiple of {FEATURE_STRIDE}",
                self.image_width, self.image_height
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        self.grid.validate().map_err(config_err)?;
        self.bins.validate().map_err(config_err)?;
        self.aug_transform().map_err(config_err)?;
        if !(0.0..=1.0).contains(&self.depth_fusion_weight) {
            return Err(Error::Config(format!(
                "depth fusion weight {} outside [0, 1]",
                self.depth_fusion_weight
            )));
        }
        if !(self.temporal.window_seconds > 0.0) {
            return Err(Error::Config("temporal window must be positive".into()));
        }
        if self.head.num_classes == 0 {
            return Err(Error::Config("head needs at least one class".into()));
        }
        self.loss_weights.validate().map_err(config_err)?;
        self.nms_radii.validate()?;
        for c in 0..self.head.num_classes {
            self.nms_radii.get(c)?;
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!(
                "score threshold {} outside [0, 1)",
                self.score_threshold
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        self.merge_budget.validate().map_err(config_err)?;
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_height / FEATURE_STRIDE, self.image_width / FEATURE_STRIDE)
    }

    pub fn aug_transform(&self) -> Result<AugTransform> {
        match self.aug {
            Some(m) => AugTransform::from_row_major(m),
            None => Ok(AugTransform::identity()),
        }
    }

    /// Channels entering the BEV encoder and head.
    pub fn stacked_channels(&self) -> usize {
        (1 + self.temporal.max_frames) * self.channels
    }

    /// Loads the rig file relative to `base`, or builds the reference rig.
    pub fn load_rig(&self, base: &Path) -> Result<CameraRig> {
        match &self.rig {
            Some(p) => CameraRig::load(base.join(p)),
            None => Ok(CameraRig::reference(self.image_width, self.image_height)),
        }
    }

    pub fn geometry(&self, rig: CameraRig) -> Result<FrustumGeometry> {
        let (feat_h, feat_w) = self.feature_size();
        Ok(FrustumGeometry {
            rig,
            aug: self.aug_transform()?,
            bins: self.bins,
            feat_h,
            feat_w,
            downsample: FEATURE_STRIDE,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneStage {
    pub conv: ConvSpec,
    pub bn: BatchNormSpec,
}

/// Three conv-BN-relu stages, strides 1, 2, 2.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub stages: [BackboneStage; 3],
}

impl BackboneWeights {
    fn widths(out: usize) -> [usize; 4] {
        [IMAGE_CHANNELS, BACKBONE_WIDTHS[0], BACKBONE_WIDTHS[1], out]
    }

    pub fn random(out: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Self::widths(out);
        let mut stage = |k: usize| -> Result<BackboneStage> {
            Ok(BackboneStage {
                conv: init::conv(&mut rng, w[k], w[k + 1], 3, BACKBONE_STRIDES[k], init::INIT_SCALE)?,
                bn: init::batchnorm(&mut rng, w[k + 1])?,
            })
        };
        Ok(Self {
            stages: [stage(0)?, stage(1)?, stage(2)?],
        })
    }

    /// Center-tap convs: feature cell `(i, j)` holds image pixel
    /// `(4i, 4j)` of channel `c` in channel `c`.
    pub fn identity(out: usize) -> Result<Self> {
        let w = Self::widths(out);
        let stage = |k: usize| -> Result<BackboneStage> {
            Ok(BackboneStage {
                conv: init::center_tap_conv(w[k], w[k + 1], 3, BACKBONE_STRIDES[k], 1.0)?,
                bn: BatchNormSpec::identity(w[k + 1])?,
            })
        };
        Ok(Self {
            stages: [stage(0)?, stage(1)?, stage(2)?],
        })
    }

    pub fn out_channels(&self) -> usize {
        self.stages[2].conv.out_channels()
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = image.clone();
        for s in &self.stages {
            x = relu(&batchnorm_forward(&conv2d_forward(&x, &s.conv)?, &s.bn)?);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineWeights {
    pub backbone: BackboneWeights,
    pub depth: DepthHeadWeights,
    pub encoder: BevEncoderWeights,
    pub head: HeadWeights,
}

impl PipelineWeights {
    pub fn for_config(cfg: &PipelineConfig) -> Result<Self> {
        let (c, stacked, bins) = (cfg.channels, cfg.stacked_channels(), cfg.bins.num_bins);
        let w = match cfg.weights {
            WeightsKind::Identity => Self {
                backbone: BackboneWeights::identity(c)?,
                depth: DepthHeadWeights::zero(c, bins)?,
                encoder: BevEncoderWeights::zero(stacked)?,
                head: HeadWeights::identity_like(stacked, cfg.head.num_classes, cfg.head.blocks, IDENTITY_HEAT_GAIN, IDENTITY_HEAT_BIAS)?,
            },
            WeightsKind::Random => {
                // one master seed, a distinct stream per module
                let s = cfg.seed;
                Self {
                    backbone: BackboneWeights::random(c, s)?,
                    depth: DepthHeadWeights::random(c, bins, s.wrapping_add(1))?,
                    encoder: BevEncoderWeights::random(stacked, s.wrapping_add(2))?,
                    head: HeadWeights::random(stacked, cfg.head.num_classes, cfg.head.blocks, s.wrapping_add(3))?,
                }
            }
        };
        if cfg.reparam_head {
            Ok(Self {
                head: w.head.reparameterized(&cfg.merge_budget)?,
                ..w
            })
        } else {
            Ok(w)
        }
    }
}

/// One camera image with optional geometric depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewInput {
    /// `[3, H, W]`.
    pub image: Tensor,
    /// Depth distribution on the feature grid, fused with the predicted one.
    pub geometric_depth: Option<DepthDistribution>,
}

/// Camera views in rig order plus the ego pose at capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub timestamp: f64,
    pub pose: EgoPose,
    pub views: Vec<ViewInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub timestamp: f64,
    /// Pooled BEV features `[C, X, Y]` of the current frame.
    pub bev: Tensor,
    pub head: HeadOutput,
    /// After circular NMS, best first.
    pub detections: Vec<Detection>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    geometry: FrustumGeometry,
    lut: LookupTable,
    weights: PipelineWeights,
    encodings: Vec<CameraParamEncoding>,
    buffer: FrameBuffer,
    mask: BTreeSet<String>,
}

impl Pipeline {
    /// Builds the table unless one is given, in which case it must match
    /// the configured geometry.
    pub fn new(cfg: PipelineConfig, rig: CameraRig, weights: PipelineWeights, lut: Option<LookupTable>) -> Result<Self> {
        cfg.validate()?;
        let geometry = cfg.geometry(rig)?;
        let lut = match lut {
            Some(l) => {
                l.check_geometry(&geometry.frustums()?, &cfg.grid)?;
                l
            }
            None => geometry.build_lut(&cfg.grid)?,
        };
        let aug = geometry.aug;
        let encodings = geometry
            .rig
            .cameras()
            .iter()
            .map(|c| encode_camera_params(&c.intrinsics, &c.extrinsics, &aug))
            .collect();
        let buffer = FrameBuffer::new(cfg.temporal.window_seconds)?;
        let p = Self {
            cfg,
            geometry,
            lut,
            weights,
            encodings,
            buffer,
            mask: BTreeSet::new(),
        };
        p.check_weights()?;
        Ok(p)
    }

    /// Resolves rig, table and weights from a config whose relative paths
    /// are anchored at `base`.
    pub fn from_config(cfg: PipelineConfig, base: &Path) -> Result<Self> {
        cfg.validate()?;
        let rig = cfg.load_rig(base)?;
        let lut = cfg.lut.as_ref().map(|p| LookupTable::load(base.join(p))).transpose()?;
        let weights = PipelineWeights::for_config(&cfg)?;
        Self::new(cfg, rig, weights, lut)
    }

    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let cfg = PipelineConfig::load(path)?;
        Self::from_config(cfg, path.parent().unwrap_or(Path::new(".")))
    }

    fn check_weights(&self) -> Result<()> {
        let w = &self.weights;
        let (c, stacked) = (self.cfg.channels, self.cfg.stacked_channels());
        if w.backbone.out_channels() != c
            || w.depth.channels() != c
            || w.depth.bins() != self.cfg.bins.num_bins
            || w.encoder.channels() != stacked
            || w.head.input_channels() != stacked
            || w.head.num_classes() != self.cfg.head.num_classes
        {
            return Err(Error::dim(format!(
                "weights do not fit the config (C = {c}, stacked = {stacked}, bins = {})",
                self.cfg.bins.num_bins
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &FrustumGeometry {
        &self.geometry
    }

    pub fn lut(&self) -> &LookupTable {
        &self.lut
    }

    pub fn weights(&self) -> &PipelineWeights {
        &self.weights
    }

    pub fn rig(&self) -> &CameraRig {
        &self.geometry.rig
    }

    /// Cameras whose features are zeroed before projection.
    pub fn set_mask(&mut self, mask: BTreeSet<String>) -> Result<()> {
        if let Some(unknown) = mask.iter().find(|m| self.rig().index_of(m).is_none()) {
            return Err(Error::UnknownCamera(unknown.clone()));
        }
        self.mask = mask;
        Ok(())
    }

    /// Forgets the temporal history.
    pub fn reset(&mut self) -> Result<()> {
        self.buffer = FrameBuffer::new(self.cfg.temporal.window_seconds)?;
        Ok(())
    }

    /// Backbone features and depth logits per camera, masked.
    pub fn view_features(&self, frame: &FrameInput) -> Result<Vec<CameraFeatures>> {
        let cams = self.rig().cameras();
        if frame.views.len() != cams.len() {
            return Err(Error::dim(format!(
                "frame has {} views, rig has {} cameras",
                frame.views.len(),
                cams.len()
            )));
        }
        let expected = [IMAGE_CHANNELS, self.cfg.image_height, self.cfg.image_width];
        let feats = frame
            .views
            .par_iter()
            .zip(cams.par_iter())
            .zip(self.encodings.par_iter())
            .map(|((v, cam), enc)| {
                if v.image.shape() != expected {
                    return Err(Error::dim(format!(
                        "camera {} image has shape {:?}, expected {expected:?}",
                        cam.name,
                        v.image.shape()
                    )));
                }
                let features = self.weights.backbone.forward(&v.image)?;
                let depth_logits = depth_head_logits(&features, enc, &self.weights.depth)?;
                Ok(CameraFeatures {
                    name: cam.name.clone(),
                    features,
                    depth_logits,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        mask_views(&feats, &self.mask, self.rig())
    }

    /// Softmax of the predicted logits, fused with geometric depth when
    /// provided.
    pub fn depths(&self, feats: &[CameraFeatures], frame: &FrameInput) -> Result<Vec<DepthDistribution>> {
        feats
            .par_iter()
            .zip(frame.views.par_iter())
            .map(|(f, v)| {
                let predicted = DepthDistribution::from_logits(&f.depth_logits)?;
                match &v.geometric_depth {
                    Some(g) => fuse_depth(&predicted, g, self.cfg.depth_fusion_weight),
                    None => Ok(predicted),
                }
            })
            .collect()
    }

    /// Pooled BEV features of one frame, without temporal state.
    pub fn project(&self, frame: &FrameInput) -> Result<Tensor> {
        let feats = self.view_features(frame)?;
        let depths = self.depths(&feats, frame)?;
        let features: Vec<Tensor> = feats.into_iter().map(|f| f.features).collect();
        splat(&features, &depths, &self.lut, &self.cfg.grid)
    }

    /// Runs every stage and pushes the frame into the temporal buffer.
    pub fn run_frame(&mut self, frame: &FrameInput) -> Result<FrameOutput> {
        let bev = self.project(frame)?;
        let stacked = align_and_concat(&self.buffer, &frame.pose, &bev, self.cfg.temporal.max_frames, &self.cfg.grid)?;
        let encoded = bev_encoder_forward(&stacked, &self.weights.encoder)?;
        let head = head_forward(&encoded, &self.weights.head)?;
        let raw = decode(&head, &self.cfg.grid, self.cfg.top_k, self.cfg.score_threshold);
        let detections = circular_nms(&raw, &self.cfg.nms_radii)?;
        self.buffer.push_frame(frame.timestamp, frame.pose, bev.clone())?;
        Ok(FrameOutput {
            timestamp: frame.timestamp,
            bev,
            head,
            detections,
        })
    }

    /// Per-module FLOPs of one frame.
    pub fn flops(&self) -> Result<FlopsReport> {
        let cfg = &self.cfg;
        let cams = self.rig().len();
        let (fh, fw) = cfg.feature_size();
        let c = cfg.channels;
        let (nx, ny) = (cfg.grid.nx(), cfg.grid.ny());
        let bins = cfg.bins.num_bins;
        let w = &self.weights;
        let mut r = FlopsReport::new();

        let (mut h, mut wd) = (cfg.image_height, cfg.image_width);
        let mut backbone = 0;
        for s in &w.backbone.stages {
            let (f, oh, ow) = conv_flops(&s.conv, h, wd)?;
            let oc = s.conv.out_channels();
            backbone += f + batchnorm_flops(oc, oh, ow) + elementwise_flops(oc * oh * ow);
            (h, wd) = (oh, ow);
        }
        r.push("backbone", backbone * cams as u64);

        let mut depth = conv_flops(&w.depth.param_proj, fh, fw)?.0 + elementwise_flops(c * fh * fw);
        for b in &w.depth.trunk {
            depth += residual_flops(b, fh, fw)?;
        }
        depth += conv_flops(&w.depth.logits, fh, fw)?.0;
        // softmax: exp, sum and divide per logit
        depth += 3 * elementwise_flops(bins * fh * fw);
        // fusion: two multiplies, an add and the renormalizing divide
        if cfg.depth_fusion_weight < 1.0 {
            depth += 4 * elementwise_flops(bins * fh * fw);
        }
        r.push("depth", depth * cams as u64);

        // one multiply-add per channel per valid frustum cell
        r.push("projection", 2 * (self.lut.valid_count() * c) as u64);

        // bilinear resampling: 4 multiplies and 3 adds per output value
        r.push("temporal", 7 * (cfg.temporal.max_frames * c * nx * ny) as u64);

        let mut encoder = 0;
        for b in &w.encoder.blocks {
            encoder += residual_flops(b, nx, ny)?;
        }
        r.push("encoder", encoder);

        let mut head = 0;
        let (mut hx, mut hy) = (nx, ny);
        for b in &w.head.trunk.blocks {
            let (f, ox, oy) = block_flops(b, hx, hy)?;
            head += f;
            (hx, hy) = (ox, oy);
        }
        head += conv_flops(&w.head.outputs, hx, hy)?.0;
        head += 4 * elementwise_flops(cfg.head.num_classes * hx * hy);
        r.push("head", head);
        Ok(r)
    }
}

fn residual_flops(b: &ResidualBlock, h: usize, w: usize) -> Result<u64> {
    let c = b.channels();
    let n = c * h * w;
    Ok(conv_flops(&b.conv1, h, w)?.0
        + conv_flops(&b.conv2, h, w)?.0
        + 2 * batchnorm_flops(c, h, w)
        + elementwise_flops(n) // skip add
        + 2 * elementwise_flops(n)) // two relus
}

/// Runs frames in order through a fresh pipeline.
pub fn run_pipeline(cfg: &PipelineConfig, base: &Path, frames: &[FrameInput]) -> Result<Vec<FrameOutput>> {
    let mut p = Pipeline::from_config(cfg.clone(), base)?;
    frames.iter().map(|f| p.run_frame(f)).collect()
}
