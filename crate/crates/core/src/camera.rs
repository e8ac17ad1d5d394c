//! Camera rig, image-space augmentation and the fixed 2D-to-3D unprojection
//! that produces the frustum point grid.
//!
//! Conventions:
//! - camera frame: x right, y down, z forward (depth is the z coordinate);
//! - ego frame: x forward, y left, z up;
//! - pixel centers sit at integer coordinates, so a horizontal flip of a
//!   `W`-wide image maps `u` to `W - 1 - u`.
//!
//! All geometry is evaluated in `f64`; frustum tensors are stored as `f32`.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CANONICAL_CAMERA_ORDER: [&str; 6] = [
    "front",
    "front-right",
    "front-left",
    "back-right",
    "back-left",
    "back",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::arg(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::arg("principal point must be finite"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Camera-to-ego rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho_err > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::arg(format!(
                "rotation is not a proper rotation (orthonormality error {ortho_err:.3e}, det {det})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::arg("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera looking horizontally along ego heading `yaw` (radians, CCW
    /// from ego +x), mounted at `translation`.
    pub fn looking_along(yaw: f64, translation: Vector3<f64>) -> Self {
        // camera axes expressed in ego: x_cam -> -y_ego, y_cam -> -z_ego, z_cam -> +x_ego
        let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let (s, c) = yaw.sin_cos();
        let yaw_rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self {
            rotation: yaw_rot * base,
            translation,
        }
    }
}

/// Homogeneous 3x3 map from original to augmented pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugTransform {
    matrix: Matrix3<f64>,
}

impl AugTransform {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self> {
        let bottom = matrix.row(2);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 1.0 {
            return Err(Error::SingularTransform(format!(
                "augmentation bottom row must be [0, 0, 1], got {bottom}"
            )));
        }
        let upper = Matrix2::new(matrix[(0, 0)], matrix[(0, 1)], matrix[(1, 0)], matrix[(1, 1)]);
        if !(upper.determinant().abs() > 1e-9) {
            return Err(Error::SingularTransform(format!(
                "augmentation linear part is singular (det {})",
                upper.determinant()
            )));
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn from_row_major(values: [f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(&values))
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.matrix;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let p = self.matrix * Vector3::new(u, v, 1.0);
        (p.x, p.y)
    }

    pub fn inverse(&self) -> Result<Matrix3<f64>> {
        self.matrix
            .try_inverse()
            .ok_or_else(|| Error::SingularTransform("augmentation matrix is not invertible".into()))
    }
}

/// Composes flip, scale, rotation (about the scaled image center) and crop,
/// applied to original pixel coordinates in that order.
pub fn compose_aug(
    flip_h: bool,
    scale: f64,
    crop_offset: (f64, f64),
    rotate: f64,
    image_size: (usize, usize),
) -> Result<AugTransform> {
    if !(scale > 0.0) {
        return Err(Error::arg(format!("augmentation scale must be positive, got {scale}")));
    }
    let (width, height) = (image_size.0 as f64, image_size.1 as f64);
    let flip = if flip_h {
        Matrix3::new(-1.0, 0.0, width - 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    } else {
        Matrix3::identity()
    };
    let scaling = Matrix3::new(scale, 0.0, 0.0, 0.0, scale, 0.0, 0.0, 0.0, 1.0);
    let (ccx, ccy) = (scale * width / 2.0, scale * height / 2.0);
    let (s, c) = rotate.sin_cos();
    let rotation = translation2(ccx, ccy)
        * Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
        * translation2(-ccx, -ccy);
    let crop = translation2(-crop_offset.0, -crop_offset.1);
    AugTransform::new(crop * rotation * scaling * flip)
}

fn translation2(tx: f64, ty: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    name: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::arg("camera rig must contain at least one camera"));
        }
        let mut seen = HashSet::new();
        for cam in &cameras {
            if !seen.insert(cam.name.as_str()) {
                return Err(Error::arg(format!("duplicate camera name `{}`", cam.name)));
            }
        }
        Ok(Self { cameras })
    }

    /// Six-camera surround rig for a `width x height` image, in canonical
    /// order. Side cameras have a 70 degree horizontal field of view, the
    /// back camera 110 degrees.
    pub fn reference(width: usize, height: usize) -> Self {
        let mounts: [(f64, f64, [f64; 3]); 6] = [
            (0.0, 70.0, [1.5, 0.0, 1.6]),
            (-55.0, 70.0, [1.3, -0.5, 1.6]),
            (55.0, 70.0, [1.3, 0.5, 1.6]),
            (-110.0, 70.0, [-0.4, -0.6, 1.6]),
            (110.0, 70.0, [-0.4, 0.6, 1.6]),
            (180.0, 110.0, [-1.0, 0.0, 1.6]),
        ];
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let cameras = CANONICAL_CAMERA_ORDER
            .iter()
            .zip(mounts)
            .map(|(name, (yaw_deg, fov_deg, t))| {
                let f = cx / (fov_deg.to_radians() / 2.0).tan();
                Camera {
                    name: (*name).to_string(),
                    intrinsics: CameraIntrinsics { fx: f, fy: f, cx, cy },
                    extrinsics: CameraExtrinsics::looking_along(
                        yaw_deg.to_radians(),
                        Vector3::new(t[0], t[1], t[2]),
                    ),
                }
            })
            .collect();
        Self { cameras }
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.name == name)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<CameraRecord> = serde_json::from_str(text)?;
        let cameras = records
            .into_iter()
            .map(|r| {
                Ok(Camera {
                    intrinsics: CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy)?,
                    extrinsics: CameraExtrinsics::new(
                        Matrix3::from_row_slice(&r.rotation),
                        Vector3::from(r.translation),
                    )?,
                    name: r.name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras)
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<CameraRecord> = self
            .cameras
            .iter()
            .map(|c| {
                let r = &c.extrinsics.rotation;
                CameraRecord {
                    name: c.name.clone(),
                    fx: c.intrinsics.fx,
                    fy: c.intrinsics.fy,
                    cx: c.intrinsics.cx,
                    cy: c.intrinsics.cy,
                    rotation: [
                        r[(0, 0)], r[(0, 1)], r[(0, 2)],
                        r[(1, 0)], r[(1, 1)], r[(1, 2)],
                        r[(2, 0)], r[(2, 1)], r[(2, 2)],
                    ],
                    translation: c.extrinsics.translation.into(),
                }
            })
            .collect();
        Ok(serde_json::to_string_pretty(&records)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Uniformly spaced depth hypotheses along each pixel ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub num_bins: usize,
}

impl Default for DepthBinSpec {
    fn default() -> Self {
        Self {
            d_min: 2.0,
            d_max: 58.0,
            num_bins: 112,
        }
    }
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, num_bins: usize) -> Result<Self> {
        let spec = Self {
            d_min,
            d_max,
            num_bins,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_min < self.d_max) || self.num_bins == 0 {
            return Err(Error::arg(format!(
                "depth bins need 0 < d_min < d_max and num_bins >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.d_max - self.d_min) / self.num_bins as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.d_min + (i as f64 + 0.5) * self.bin_width()
    }

    /// Bin whose center is closest to `depth`, or `None` outside `[d_min, d_max)`.
    pub fn nearest_bin(&self, depth: f64) -> Option<usize> {
        if !(depth >= self.d_min && depth < self.d_max) {
            return None;
        }
        let i = ((depth - self.d_min) / self.bin_width()).floor() as usize;
        Some(i.min(self.num_bins - 1))
    }
}

/// Precomputed unprojection for one camera and augmentation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Unprojector {
    inv_aug: Matrix3<f64>,
    intr: CameraIntrinsics,
    extr: CameraExtrinsics,
}

impl Unprojector {
    pub(crate) fn new(
        intr: &CameraIntrinsics,
        extr: &CameraExtrinsics,
        aug: &AugTransform,
    ) -> Result<Self> {
        Ok(Self {
            inv_aug: aug.inverse()?,
            intr: *intr,
            extr: *extr,
        })
    }

    #[inline]
    pub(crate) fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let orig = self.inv_aug * Vector3::new(u, v, 1.0);
        let (u0, v0) = (orig.x / orig.z, orig.y / orig.z);
        let p_cam = Vector3::new(
            depth * (u0 - self.intr.cx) / self.intr.fx,
            depth * (v0 - self.intr.cy) / self.intr.fy,
            depth,
        );
        self.extr.rotation * p_cam + self.extr.translation
    }
}

/// Ego-frame point seen at augmented pixel `(u, v)` and camera depth `depth`.
pub fn pixel_to_ego(
    u: f64,
    v: f64,
    depth: f64,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    aug: &AugTransform,
) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::arg(format!("depth must be positive, got {depth}")));
    }
    Ok(Unprojector::new(intr, extr, aug)?.unproject(u, v, depth))
}

/// Projects an ego point into augmented pixel coordinates. Returns
/// `(u, v, depth)`; depth is non-positive for points behind the camera.
pub fn ego_to_pixel(
    point: &Vector3<f64>,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    aug: &AugTransform,
) -> (f64, f64, f64) {
    let p = extr.rotation.transpose() * (point - extr.translation);
    let u0 = intr.fx * p.x / p.z + intr.cx;
    let v0 = intr.fy * p.y / p.z + intr.cy;
    let (u, v) = aug.apply(u0, v0);
    (u, v, p.z)
}

/// Ego-frame frustum points `[num_bins, feat_h, feat_w, 3]`, sampled at
/// feature-cell centers in augmented pixel space.
pub fn build_frustum(
    feat_h: usize,
    feat_w: usize,
    downsample: usize,
    bins: &DepthBinSpec,
    intr: &CameraIntrinsics,
    extr: &CameraExtrinsics,
    aug: &AugTransform,
) -> Result<Tensor> {
    if downsample == 0 {
        return Err(Error::arg("downsample must be at least 1"));
    }
    bins.validate()?;
    let un = Unprojector::new(intr, extr, aug)?;
    let ds = downsample as f64;
    let row = feat_w * 3;
    let mut data = vec![0f32; bins.num_bins * feat_h * row];
    data.par_chunks_mut(feat_h * row)
        .enumerate()
        .for_each(|(d, slab)| {
            let depth = bins.bin_center(d);
            for i in 0..feat_h {
                for j in 0..feat_w {
                    let p = un.unproject((j as f64 + 0.5) * ds, (i as f64 + 0.5) * ds, depth);
                    let o = i * row + j * 3;
                    slab[o] = p.x as f32;
                    slab[o + 1] = p.y as f32;
                    slab[o + 2] = p.z as f32;
                }
            }
        });
    Tensor::new(vec![bins.num_bins, feat_h, feat_w, 3], data)
}

/// Frustums for every camera in the rig, sharing one augmentation.
pub fn build_rig_frustums(
    rig: &CameraRig,
    feat_h: usize,
    feat_w: usize,
    downsample: usize,
    bins: &DepthBinSpec,
    aug: &AugTransform,
) -> Result<Vec<Tensor>> {
    rig.cameras()
        .iter()
        .map(|c| build_frustum(feat_h, feat_w, downsample, bins, &c.intrinsics, &c.extrinsics, aug))
        .collect()
}
