//! Synthetic scenes with exact ground truth.
//!
//! Every object center is projected into each camera. Where it lands inside
//! the image and the depth range, a Gaussian blob (sigma 1.5 feature cells,
//! cut at 3 sigma) is written into image channel 0 at feature resolution and
//! nearest-upsampled to pixels. The blob cells get a one-hot geometric depth
//! at the object's bin; every other cell gets a uniform distribution.
//! Occlusion is ignored.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::ego_to_pixel;
use crate::error::{Error, Result};
use crate::head::{corner_loss_2d, gaussian_focal_loss, smooth_l1, total_loss, Detection, HeadOutput, LossWeights, CLASS_NAMES};
use crate::lift_splat::{BevGridSpec, DepthDistribution, FrustumGeometry, LookupTable, INVALID_VOXEL};
use crate::pipeline::{FrameInput, ViewInput, IMAGE_CHANNELS};
use crate::temporal::EgoPose;
use crate::tensor::Tensor;

pub const BLOB_SIGMA_CELLS: f64 = 1.5;
pub const BLOB_CUTOFF_SIGMAS: f64 = 3.0;
/// Closest allowed planar distance between two generated objects, meters.
pub const MIN_OBJECT_SPACING: f64 = 4.0;
const MIN_RANGE: f64 = 6.0;
const MAX_RANGE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
}

impl SceneObject {
    pub fn as_detection(&self, score: f64) -> Detection {
        Detection {
            x: self.x,
            y: self.y,
            z: self.z,
            w: self.w,
            l: self.l,
            h: self.h,
            yaw: self.yaw,
            vx: self.vx,
            vy: self.vy,
            score,
            class_id: self.class_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// Ego-frame objects at capture time.
    pub objects: Vec<SceneObject>,
    pub timestamp: f64,
    pub pose: EgoPose,
}

/// Typical `(w, l, h)` in meters per class.
pub fn class_dims(class_id: usize) -> (f64, f64, f64) {
    match CLASS_NAMES.get(class_id).copied() {
        Some("car") => (1.9, 4.5, 1.6),
        Some("truck") => (2.5, 7.0, 3.0),
        Some("construction_vehicle") => (2.8, 6.5, 3.2),
        Some("bus") => (2.9, 11.0, 3.5),
        Some("trailer") => (2.9, 12.0, 3.9),
        Some("barrier") => (2.5, 0.5, 1.0),
        Some("motorcycle") => (0.8, 2.1, 1.5),
        Some("bicycle") => (0.6, 1.7, 1.3),
        Some("pedestrian") => (0.7, 0.7, 1.75),
        _ => (0.4, 0.4, 1.0),
    }
}

/// Where an object center lands in one camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewHit {
    pub camera: usize,
    /// Fractional feature-grid row and column (cell centers are integers).
    pub row: f64,
    pub col: f64,
    pub depth: f64,
}

/// Cameras seeing the point inside their image and depth range.
pub fn project_point(x: f64, y: f64, z: f64, geometry: &FrustumGeometry) -> Vec<ViewHit> {
    let (img_h, img_w) = (
        (geometry.feat_h * geometry.downsample) as f64,
        (geometry.feat_w * geometry.downsample) as f64,
    );
    let ds = geometry.downsample as f64;
    let p = Vector3::new(x, y, z);
    geometry
        .rig
        .cameras()
        .iter()
        .enumerate()
        .filter_map(|(k, cam)| {
            let (u, v, depth) = ego_to_pixel(&p, &cam.intrinsics, &cam.extrinsics, &geometry.aug);
            let visible = depth >= geometry.bins.d_min
                && depth < geometry.bins.d_max
                && (0.0..img_w).contains(&u)
                && (0.0..img_h).contains(&v);
            visible.then_some(ViewHit {
                camera: k,
                row: v / ds - 0.5,
                col: u / ds - 0.5,
                depth,
            })
        })
        .collect()
}

/// Images and geometric depth for a set of ego-frame objects.
pub fn render_views(objects: &[SceneObject], geometry: &FrustumGeometry) -> Result<Vec<ViewInput>> {
    let (fh, fw, ds) = (geometry.feat_h, geometry.feat_w, geometry.downsample);
    let bins = geometry.bins.num_bins;
    let plane = fh * fw;
    let cams = geometry.rig.len();
    // per camera: blob value and (weight, bin) of the strongest contributor
    let mut blob = vec![vec![0f32; plane]; cams];
    let mut owner: Vec<Vec<Option<(f64, usize)>>> = vec![vec![None; plane]; cams];
    let reach = BLOB_SIGMA_CELLS * BLOB_CUTOFF_SIGMAS;
    for o in objects {
        for hit in project_point(o.x, o.y, o.z, geometry) {
            let bin = geometry
                .bins
                .nearest_bin(hit.depth)
                .ok_or_else(|| Error::Numeric(format!("visible depth {} has no bin", hit.depth)))?;
            let i0 = (hit.row - reach).ceil().max(0.0) as usize;
            let i1 = ((hit.row + reach).floor() as isize).min(fh as isize - 1);
            let j0 = (hit.col - reach).ceil().max(0.0) as usize;
            let j1 = ((hit.col + reach).floor() as isize).min(fw as isize - 1);
            for i in i0..=(i1.max(0) as usize) {
                for j in j0..=(j1.max(0) as usize) {
                    let (di, dj) = (i as f64 - hit.row, j as f64 - hit.col);
                    let d2 = di * di + dj * dj;
                    if d2 > reach * reach {
                        continue;
                    }
                    let wgt = (-d2 / (2.0 * BLOB_SIGMA_CELLS * BLOB_SIGMA_CELLS)).exp();
                    let p = i * fw + j;
                    let cell = &mut blob[hit.camera][p];
                    *cell = cell.max(wgt as f32);
                    if owner[hit.camera][p].is_none_or(|(w0, _)| wgt > w0) {
                        owner[hit.camera][p] = Some((wgt, bin));
                    }
                }
            }
        }
    }
    (0..cams)
        .map(|k| {
            let (h, w) = (fh * ds, fw * ds);
            let b = &blob[k];
            let image = Tensor::from_fn(&[IMAGE_CHANNELS, h, w], |idx| {
                if idx >= h * w {
                    return 0.0;
                }
                let (r, c) = (idx / w, idx % w);
                b[(r / ds) * fw + c / ds]
            })?;
            let mut depth = vec![0f32; bins * plane];
            for (p, o) in owner[k].iter().enumerate() {
                match o {
                    Some((_, bin)) => depth[bin * plane + p] = 1.0,
                    None => {
                        for d in 0..bins {
                            depth[d * plane + p] = 1.0 / bins as f32;
                        }
                    }
                }
            }
            Ok(ViewInput {
                image,
                geometric_depth: Some(DepthDistribution::new(Tensor::new(vec![bins, fh, fw], depth)?)?),
            })
        })
        .collect()
}

/// Planar range band in which objects are placed: inside the grid with a
/// one-cell margin and well inside the depth range.
fn range_band(spec: &BevGridSpec, geometry: &FrustumGeometry) -> Result<(f64, f64)> {
    let half = [-spec.x_min, spec.x_max, -spec.y_min, spec.y_max]
        .into_iter()
        .fold(f64::INFINITY, f64::min)
        - spec.resolution;
    let lo = MIN_RANGE.max(geometry.bins.d_min + 2.0);
    let hi = MAX_RANGE.min(half).min(geometry.bins.d_max - 2.0);
    if !(hi > lo) {
        return Err(Error::Config(format!(
            "grid and depth range leave no room for objects (band [{lo}, {hi}])"
        )));
    }
    Ok((lo, hi))
}

/// Seeded scene around the ego vehicle and its rendered views.
pub fn generate_scene(
    seed: u64,
    n_objects: usize,
    geometry: &FrustumGeometry,
    spec: &BevGridSpec,
    timestamp: f64,
    pose: EgoPose,
) -> Result<(SyntheticScene, FrameInput)> {
    spec.validate()?;
    let (lo, hi) = range_band(spec, geometry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    let z_lo = 0.3f64.max(spec.z_min);
    let z_hi = 1.2f64.min(spec.z_max - 1e-3).max(z_lo);
    while objects.len() < n_objects {
        // rejection sampling on spacing; give up on spacing after a while
        let mut tries = 0;
        let (x, y) = loop {
            let r = rng.gen_range(lo..hi);
            let a = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let (x, y) = (r * a.cos(), r * a.sin());
            tries += 1;
            let clear = objects
                .iter()
                .all(|o| (o.x - x).hypot(o.y - y) >= MIN_OBJECT_SPACING);
            if clear || tries > 100 {
                break (x, y);
            }
        };
        let class_id = rng.gen_range(0..CLASS_NAMES.len());
        let (w, l, h) = class_dims(class_id);
        objects.push(SceneObject {
            class_id,
            x,
            y,
            z: rng.gen_range(z_lo..=z_hi),
            w,
            l,
            h,
            yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            vx: rng.gen_range(-2.0..2.0),
            vy: rng.gen_range(-2.0..2.0),
        });
    }
    let views = render_views(&objects, geometry)?;
    Ok((
        SyntheticScene {
            objects,
            timestamp,
            pose,
        },
        FrameInput {
            timestamp,
            pose,
            views,
        },
    ))
}

/// Peak search result for one object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub true_cell: (usize, usize),
    /// Largest cell of the search window, `None` if the window holds no mass.
    pub peak_cell: Option<(usize, usize)>,
    /// Chebyshev distance between the two cells.
    pub error_cells: Option<usize>,
}

impl Localization {
    pub fn within(&self, cells: usize) -> bool {
        self.error_cells.is_some_and(|e| e <= cells)
    }
}

/// For each object, the cell with the most mass in `channel` within
/// `window` cells of the object's own cell. Ties go to the first cell in
/// row-major order.
pub fn localize(bev: &Tensor, channel: usize, objects: &[SceneObject], spec: &BevGridSpec, window: usize) -> Result<Vec<Localization>> {
    let (c, nx, ny) = bev.dims3()?;
    if channel >= c || (nx, ny) != (spec.nx(), spec.ny()) {
        return Err(Error::dim(format!(
            "BEV map {:?} does not fit channel {channel} of a {}x{} grid",
            bev.shape(),
            spec.nx(),
            spec.ny()
        )));
    }
    let map = &bev.data()[channel * nx * ny..(channel + 1) * nx * ny];
    objects
        .iter()
        .map(|o| {
            let z = o.z.clamp(spec.z_min, spec.z_max - 1e-9);
            let v = spec
                .voxel_of(o.x, o.y, z)
                .ok_or_else(|| Error::arg(format!("object at ({}, {}) is outside the grid", o.x, o.y)))?
                as usize;
            let (ti, tj) = (v / ny, v % ny);
            let mut best: Option<(f32, usize, usize)> = None;
            for i in ti.saturating_sub(window)..=(ti + window).min(nx - 1) {
                for j in tj.saturating_sub(window)..=(tj + window).min(ny - 1) {
                    let m = map[i * ny + j];
                    if m > 0.0 && best.is_none_or(|(b, _, _)| m > b) {
                        best = Some((m, i, j));
                    }
                }
            }
            let peak_cell = best.map(|(_, i, j)| (i, j));
            Ok(Localization {
                true_cell: (ti, tj),
                peak_cell,
                error_cells: peak_cell.map(|(i, j)| i.abs_diff(ti).max(j.abs_diff(tj))),
            })
        })
        .collect()
}

/// Voxels reached by `camera` and by no other camera.
pub fn camera_exclusive_voxels(lut: &LookupTable, camera: usize) -> Vec<u32> {
    let mut mine = BTreeSet::new();
    let mut others = BTreeSet::new();
    for (cell, &v) in lut.voxel_indices().iter().enumerate() {
        if v == INVALID_VOXEL {
            continue;
        }
        if lut.camera_of_cell(cell) == camera {
            mine.insert(v);
        } else {
            others.insert(v);
        }
    }
    mine.difference(&others).copied().collect()
}

/// CenterPoint heatmap target: a Gaussian of `sigma_cells` around each
/// object's cell, exactly 1 at the cell, max over overlapping objects.
pub fn heatmap_target(objects: &[SceneObject], num_classes: usize, spec: &BevGridSpec, sigma_cells: f64) -> Result<Tensor> {
    let (nx, ny) = (spec.nx(), spec.ny());
    let mut t = Tensor::zeros(&[num_classes, nx, ny])?;
    let reach = (3.0 * sigma_cells).ceil() as usize;
    for o in objects.iter().filter(|o| o.class_id < num_classes) {
        let Some(v) = spec.voxel_of(o.x, o.y, o.z.clamp(spec.z_min, spec.z_max - 1e-9)) else {
            continue;
        };
        let (ci, cj) = (v as usize / ny, v as usize % ny);
        for i in ci.saturating_sub(reach)..=(ci + reach).min(nx - 1) {
            for j in cj.saturating_sub(reach)..=(cj + reach).min(ny - 1) {
                let d2 = (i.abs_diff(ci).pow(2) + j.abs_diff(cj).pow(2)) as f64;
                let g = (-d2 / (2.0 * sigma_cells * sigma_cells)).exp() as f32;
                let slot = &mut t.data_mut()[(o.class_id * nx + i) * ny + j];
                *slot = slot.max(g);
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_cls: f64,
    pub l_2d: f64,
    pub total: f64,
}

/// Training-style losses of a head output against scene ground truth.
///
/// Regression uses smooth L1 on all ten regression channels at object
/// cells; the 2D term compares projected corners of each object with the
/// nearest same-class detection within two cells, in every camera that sees
/// the object center. The normalizer is the object count (at least 1).
pub fn scene_losses(
    head: &HeadOutput,
    detections: &[Detection],
    scene: &SyntheticScene,
    spec: &BevGridSpec,
    geometry: &FrustumGeometry,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let (nx, ny) = (spec.nx(), spec.ny());
    let target = heatmap_target(&scene.objects, head.num_classes(), spec, 1.0)?;
    let l_cls = gaussian_focal_loss(&head.heatmap, &target)?;

    let plane = nx * ny;
    let pred: Vec<f32> = [&head.offset, &head.height, &head.dims, &head.rot, &head.vel]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let mut tgt = vec![0f32; 10 * plane];
    let mut mask = vec![0f32; 10 * plane];
    for o in &scene.objects {
        let Some(v) = spec.voxel_of(o.x, o.y, o.z.clamp(spec.z_min, spec.z_max - 1e-9)) else {
            continue;
        };
        let (i, j) = (v as usize / ny, v as usize % ny);
        let values = [
            (o.x - spec.x_min) / spec.resolution - i as f64 - 0.5,
            (o.y - spec.y_min) / spec.resolution - j as f64 - 0.5,
            o.z,
            o.w.ln(),
            o.l.ln(),
            o.h.ln(),
            o.yaw.sin(),
            o.yaw.cos(),
            o.vx,
            o.vy,
        ];
        for (ch, val) in values.iter().enumerate() {
            tgt[ch * plane + i * ny + j] = *val as f32;
            mask[ch * plane + i * ny + j] = 1.0;
        }
    }
    let shape = vec![10, nx, ny];
    let l_det = smooth_l1(
        &Tensor::new(shape.clone(), pred)?,
        &Tensor::new(shape.clone(), tgt)?,
        &Tensor::new(shape, mask)?,
    )?;

    let mut l_2d = 0.0;
    for o in &scene.objects {
        let nearest = detections
            .iter()
            .filter(|d| d.class_id == o.class_id)
            .map(|d| ((d.x - o.x).hypot(d.y - o.y), d))
            .filter(|(dist, _)| *dist <= 2.0 * spec.resolution)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, d)) = nearest {
            let truth = o.as_detection(1.0);
            for hit in project_point(o.x, o.y, o.z, geometry) {
                l_2d += corner_loss_2d(d, &truth, &geometry.rig.cameras()[hit.camera], &geometry.aug);
            }
        }
    }
    let w = LossWeights {
        n: (scene.objects.len() as f64).max(1.0),
        ..*weights
    };
    Ok(LossBreakdown {
        l_det,
        l_cls,
        l_2d,
        total: total_loss(l_det, l_cls, l_2d, &w)?,
    })
}
