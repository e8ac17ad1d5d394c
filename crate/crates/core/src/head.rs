//! CenterPoint-style BEV detection head: decode, circular NMS and losses.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{ego_to_pixel, AugTransform, Camera};
use crate::error::{Error, Result};
use crate::init;
use crate::lift_splat::BevGridSpec;
use crate::ops::{conv2d_forward, BatchNormSpec, ConvSpec};
use crate::reparam::{reparam_graph, Activation, Branch, BranchBlock, GraphDesc, MergeBudget};
use crate::store::TensorStore;
use crate::temporal::normalize_angle;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 10] = [
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
];

/// Regression channels after the class heatmaps: offset (2), height (1),
/// dims (3), rot (2), vel (2).
pub const REGRESSION_CHANNELS: usize = 10;

/// Heatmap probabilities are clamped to `[FOCAL_EPS, 1 - FOCAL_EPS]`.
pub const FOCAL_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub heatmap: Tensor,
    pub offset: Tensor,
    pub height: Tensor,
    pub dims: Tensor,
    pub rot: Tensor,
    pub vel: Tensor,
}

impl HeadOutput {
    pub fn new(heatmap: Tensor, offset: Tensor, height: Tensor, dims: Tensor, rot: Tensor, vel: Tensor) -> Result<Self> {
        let (_, x, y) = heatmap.dims3()?;
        for (name, t, c) in [
            ("offset", &offset, 2),
            ("height", &height, 1),
            ("dims", &dims, 3),
            ("rot", &rot, 2),
            ("vel", &vel, 2),
        ] {
            if t.shape() != [c, x, y] {
                return Err(Error::dim(format!(
                    "{name} map has shape {:?}, expected [{c}, {x}, {y}]",
                    t.shape()
                )));
            }
        }
        if let Some(v) = heatmap.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("heatmap score {v} outside [0, 1]")));
        }
        Ok(Self {
            heatmap,
            offset,
            height,
            dims,
            rot,
            vel,
        })
    }

    /// Splits a raw `[num_classes + 10, X, Y]` map, applying a sigmoid to
    /// the class channels.
    pub fn from_raw(raw: &Tensor, num_classes: usize) -> Result<Self> {
        let (c, x, y) = raw.dims3()?;
        if c != num_classes + REGRESSION_CHANNELS {
            return Err(Error::dim(format!(
                "raw head map has {c} channels, expected {}",
                num_classes + REGRESSION_CHANNELS
            )));
        }
        let plane = x * y;
        let slice = |from: usize, n: usize| Tensor::new(vec![n, x, y], raw.data()[from * plane..(from + n) * plane].to_vec());
        let heat = slice(0, num_classes)?.map(sigmoid);
        let r = num_classes;
        Self::new(heat, slice(r, 2)?, slice(r + 2, 1)?, slice(r + 3, 3)?, slice(r + 6, 2)?, slice(r + 8, 2)?)
    }

    pub fn num_classes(&self) -> usize {
        self.heatmap.shape()[0]
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub score: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.z, self.w, self.l, self.h, self.yaw, self.vx, self.vy, self.score]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric(format!("non-finite detection field in {self:?}")));
        }
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return Err(Error::arg(format!("detection dims must be positive: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::arg(format!("detection score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    /// Box corners in the ego frame. `z` is the box center, `l` runs along
    /// the heading and `w` across it.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (s, c) = self.yaw.sin_cos();
        let mut out = [Vector3::zeros(); 8];
        for (k, p) in out.iter_mut().enumerate() {
            let dl = if k & 1 == 0 { 0.5 } else { -0.5 } * self.l;
            let dw = if k & 2 == 0 { 0.5 } else { -0.5 } * self.w;
            let dh = if k & 4 == 0 { 0.5 } else { -0.5 } * self.h;
            *p = Vector3::new(self.x + c * dl - s * dw, self.y + s * dl + c * dw, self.z + dh);
        }
        out
    }
}

/// Reads one detection per non-empty line.
pub fn read_detections_jsonl(text: &str) -> Result<Vec<Detection>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let d: Detection = serde_json::from_str(l)?;
            d.validate()?;
            Ok(d)
        })
        .collect()
}

pub fn write_detections_jsonl(dets: &[Detection]) -> Result<String> {
    let mut s = String::new();
    for d in dets {
        s.push_str(&serde_json::to_string(d)?);
        s.push('\n');
    }
    Ok(s)
}

/// Local-maximum peaks above `score_thresh`, best `top_k` first.
pub fn decode(out: &HeadOutput, spec: &BevGridSpec, top_k: usize, score_thresh: f32) -> Vec<Detection> {
    let (classes, nx, ny) = out.heatmap.dims3().expect("validated head output");
    let heat = out.heatmap.data();
    let plane = nx * ny;
    let mut peaks: Vec<(f32, usize, usize, usize)> = (0..classes)
        .into_par_iter()
        .flat_map_iter(|c| {
            let map = &heat[c * plane..(c + 1) * plane];
            let mut found = Vec::new();
            for i in 0..nx {
                for j in 0..ny {
                    let v = map[i * ny + j];
                    if v > score_thresh && is_local_max(map, nx, ny, i, j) {
                        found.push((v, c, i, j));
                    }
                }
            }
            found
        })
        .collect();
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    peaks.truncate(top_k);
    let at = |t: &Tensor, ch: usize, i: usize, j: usize| t.data()[ch * plane + i * ny + j] as f64;
    peaks
        .into_iter()
        .map(|(score, class_id, i, j)| Detection {
            x: spec.x_min + (i as f64 + 0.5 + at(&out.offset, 0, i, j)) * spec.resolution,
            y: spec.y_min + (j as f64 + 0.5 + at(&out.offset, 1, i, j)) * spec.resolution,
            z: at(&out.height, 0, i, j),
            w: at(&out.dims, 0, i, j).exp(),
            l: at(&out.dims, 1, i, j).exp(),
            h: at(&out.dims, 2, i, j).exp(),
            yaw: normalize_angle(at(&out.rot, 0, i, j).atan2(at(&out.rot, 1, i, j))),
            vx: at(&out.vel, 0, i, j),
            vy: at(&out.vel, 1, i, j),
            score: score as f64,
            class_id,
        })
        .collect()
}

fn is_local_max(map: &[f32], nx: usize, ny: usize, i: usize, j: usize) -> bool {
    let v = map[i * ny + j];
    for ii in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
        for jj in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
            if map[ii * ny + jj] > v {
                return false;
            }
        }
    }
    true
}

/// Per-class suppression radii in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NmsRadii(pub BTreeMap<usize, f64>);

impl NmsRadii {
    pub fn new(radii: BTreeMap<usize, f64>) -> Result<Self> {
        let r = Self(radii);
        r.validate()?;
        Ok(r)
    }

    pub fn uniform(classes: usize, radius: f64) -> Result<Self> {
        Self::new((0..classes).map(|c| (c, radius)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        for (c, r) in &self.0 {
            if !(r.is_finite() && *r > 0.0) {
                return Err(Error::Config(format!("NMS radius for class {c} must be positive, got {r}")));
            }
        }
        Ok(())
    }

    pub fn get(&self, class_id: usize) -> Result<f64> {
        self.0
            .get(&class_id)
            .copied()
            .ok_or_else(|| Error::Config(format!("no NMS radius configured for class {class_id}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Default for NmsRadii {
    /// 4 m for vehicle classes, 0.5 m for pedestrians, 1 m otherwise.
    fn default() -> Self {
        Self(
            CLASS_NAMES
                .iter()
                .enumerate()
                .map(|(c, name)| {
                    let r = match *name {
                        "car" | "truck" | "construction_vehicle" | "bus" | "trailer" => 4.0,
                        "pedestrian" => 0.5,
                        _ => 1.0,
                    };
                    (c, r)
                })
                .collect(),
        )
    }
}

/// Greedy suppression by BEV center distance within each class. Ties in
/// score keep input order. Output is sorted by descending score.
pub fn circular_nms(dets: &[Detection], radii: &NmsRadii) -> Result<Vec<Detection>> {
    radii.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, d) in dets.iter().enumerate() {
        by_class.entry(d.class_id).or_default().push(k);
    }
    let groups: Vec<(f64, Vec<usize>)> = by_class
        .into_iter()
        .map(|(c, idx)| Ok((radii.get(c)?, idx)))
        .collect::<Result<_>>()?;
    let mut kept: Vec<usize> = groups
        .into_par_iter()
        .flat_map_iter(|(radius, mut idx)| {
            idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
            let r2 = radius * radius;
            let mut keep: Vec<usize> = Vec::new();
            for k in idx {
                let d = &dets[k];
                let clear = keep.iter().all(|&q| {
                    let (dx, dy) = (dets[q].x - d.x, dets[q].y - d.y);
                    dx * dx + dy * dy >= r2
                });
                if clear {
                    keep.push(k);
                }
            }
            keep
        })
        .collect();
    kept.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    Ok(kept.into_iter().map(|k| dets[k]).collect())
}

/// Penalty-reduced focal loss on heatmaps, summed over all cells.
pub fn gaussian_focal_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let mut loss = 0f64;
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS) as f64;
        let y = y as f64;
        if y == 1.0 {
            loss -= (1.0 - p).powi(2) * p.ln();
        } else {
            loss -= (1.0 - y).powi(4) * p.powi(2) * (1.0 - p).ln();
        }
    }
    Ok(loss)
}

fn smooth_l1_scalar(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Masked smooth-L1 sum.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    pred.ensure_same_shape(mask)?;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .zip(mask.data())
        .map(|((&p, &t), &m)| m as f64 * smooth_l1_scalar(p as f64 - t as f64))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Normalizer, the number of positive targets.
    pub n: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            n: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if ![self.alpha, self.beta, self.gamma].iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::arg(format!("loss weights must be non-negative: {self:?}")));
        }
        if !(self.n >= 1.0) || !self.n.is_finite() {
            return Err(Error::arg(format!("loss normalizer must be at least 1, got {}", self.n)));
        }
        Ok(())
    }
}

/// `(alpha * l_det + beta * l_cls + gamma * l_2d) / n`.
pub fn total_loss(l_det: f64, l_cls: f64, l_2d: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok((w.alpha * l_det + w.beta * l_cls + w.gamma * l_2d) / w.n)
}

/// Pixel coordinates of the box corners, `None` for corners at or behind
/// the image plane.
pub fn project_corners(det: &Detection, camera: &Camera, aug: &AugTransform) -> [Option<(f64, f64)>; 8] {
    det.corners().map(|p| {
        let (u, v, depth) = ego_to_pixel(&p, &camera.intrinsics, &camera.extrinsics, aug);
        (depth > 1e-6).then_some((u, v))
    })
}

/// Smooth-L1 between projected corners of two boxes, summed over corners
/// visible in both.
pub fn corner_loss_2d(pred: &Detection, target: &Detection, camera: &Camera, aug: &AugTransform) -> f64 {
    project_corners(pred, camera, aug)
        .iter()
        .zip(project_corners(target, camera, aug))
        .filter_map(|(p, t)| Some(((*p)?, t?)))
        .map(|((pu, pv), (tu, tv))| smooth_l1_scalar(pu - tu) + smooth_l1_scalar(pv - tv))
        .sum()
}

/// Re-parameterizable trunk followed by one 1x1 conv producing
/// `num_classes + 10` channels (heatmap logits, then regression maps).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub trunk: GraphDesc,
    pub outputs: ConvSpec,
}

impl HeadWeights {
    pub fn new(trunk: GraphDesc, outputs: ConvSpec) -> Result<Self> {
        if outputs.kernel() != (1, 1) || outputs.in_channels() != trunk.output_channels() {
            return Err(Error::dim(format!(
                "output conv is {:?} with {} inputs, trunk produces {}",
                outputs.kernel(),
                outputs.in_channels(),
                trunk.output_channels()
            )));
        }
        if outputs.out_channels() <= REGRESSION_CHANNELS {
            return Err(Error::dim("output conv needs at least one class channel"));
        }
        Ok(Self { trunk, outputs })
    }

    pub fn num_classes(&self) -> usize {
        self.outputs.out_channels() - REGRESSION_CHANNELS
    }

    pub fn input_channels(&self) -> usize {
        self.trunk.input_channels
    }

    /// Multi-branch trunk (3x3 + BN, 1x1 + BN, BN identity) with seeded
    /// uniform weights.
    pub fn random(channels: usize, num_classes: usize, blocks: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = init::INIT_SCALE;
        let trunk = (0..blocks)
            .map(|_| {
                BranchBlock::new(
                    Branch::with_bn(init::conv(&mut rng, channels, channels, 3, 1, s)?, init::batchnorm(&mut rng, channels)?),
                    Some(Branch::with_bn(init::conv(&mut rng, channels, channels, 1, 1, s)?, init::batchnorm(&mut rng, channels)?)),
                    Some(init::batchnorm(&mut rng, channels)?),
                    Activation::Relu,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            GraphDesc::new(channels, trunk)?,
            init::conv(&mut rng, channels, num_classes + REGRESSION_CHANNELS, 1, 1, s)?,
        )
    }

    /// Trunk blocks that reproduce their input (half through a center-tap
    /// conv, half through the identity branch) and an output conv reading
    /// channel 0 into the class-0 heatmap:
    /// `logit = heat_gain * x0 + heat_bias`. Other classes stay near zero.
    /// Regression maps are constant: zero offsets, height 0.8 m,
    /// dims (1.9, 4.5, 1.6) m, yaw 0, zero velocity.
    pub fn identity_like(channels: usize, num_classes: usize, blocks: usize, heat_gain: f32, heat_bias: f32) -> Result<Self> {
        let half = BatchNormSpec::new(
            Tensor::zeros(&[channels])?,
            Tensor::full(&[channels], 1.0)?,
            Tensor::full(&[channels], 0.5)?,
            Tensor::zeros(&[channels])?,
            0.0,
        )?;
        let trunk = (0..blocks)
            .map(|_| {
                BranchBlock::new(
                    Branch::plain(init::center_tap_conv(channels, channels, 3, 1, 0.5)?),
                    None,
                    Some(half.clone()),
                    Activation::Relu,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out_ch = num_classes + REGRESSION_CHANNELS;
        let mut w = Tensor::zeros(&[out_ch, channels, 1, 1])?;
        w.data_mut()[0] = heat_gain;
        let mut b = vec![0f32; out_ch];
        b[0] = heat_bias;
        for v in &mut b[1..num_classes] {
            *v = -20.0;
        }
        let r = num_classes;
        b[r + 2] = 0.8;
        b[r + 3] = 1.9f32.ln();
        b[r + 4] = 4.5f32.ln();
        b[r + 5] = 1.6f32.ln();
        b[r + 7] = 1.0;
        Self::new(
            GraphDesc::new(channels, trunk)?,
            ConvSpec::new(w, Some(Tensor::vector(b)?), (1, 1), (0, 0))?,
        )
    }

    /// Same head with every trunk block collapsed to a plain conv.
    pub fn reparameterized(&self, budget: &MergeBudget) -> Result<Self> {
        Self::new(reparam_graph(&self.trunk, budget)?, self.outputs.clone())
    }

    /// `dir/trunk.json` (+ tensors) and `dir/outputs/` (tensor store).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.trunk.save(dir.join("trunk.json"))?;
        let mut s = TensorStore::new();
        s.insert_conv("outputs", &self.outputs);
        s.save(dir.join("outputs"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::new(
            GraphDesc::load(dir.join("trunk.json"))?,
            TensorStore::load(dir.join("outputs"))?.conv("outputs", 1)?,
        )
    }
}

pub fn head_forward(bev: &Tensor, wts: &HeadWeights) -> Result<HeadOutput> {
    let x = wts.trunk.forward(bev)?;
    HeadOutput::from_raw(&conv2d_forward(&x, &wts.outputs)?, wts.num_classes())
}
