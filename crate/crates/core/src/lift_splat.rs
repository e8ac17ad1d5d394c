//! Lift per-camera features along depth and splat them into a BEV grid
//! through a precomputed frustum-cell -> voxel lookup table.
//!
//! The table is built once from the frustum points. Valid cells are sorted
//! by voxel, so each voxel owns a contiguous run ("segment") and the splat
//! reduces every segment sequentially. Within a segment the entries are
//! ordered by their ego-frame point, which keeps the accumulation order
//! independent of how the cameras are ordered.
//!
//! LUT file layout (little-endian):
//!
//! ```text
//! "BEVLUT01"                  magic
//! u32 version = 1
//! u32 x 6                     cams, bins, h, w, X, Y
//! u64 fingerprint
//! u64 valid_count
//! valid_count x (u32 cell, u32 voxel)   in sorted order
//! u32 segment_count
//! (segment_count + 1) x u32   segment offsets
//! ```

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{build_frustum, AugTransform, CameraRig, DepthBinSpec};
use crate::error::{Error, Result};
use crate::ops::softmax_channel;
use crate::tensor::Tensor;

pub const LUT_MAGIC: &[u8; 8] = b"BEVLUT01";
pub const LUT_VERSION: u32 = 1;
pub const INVALID_VOXEL: u32 = u32::MAX;

/// Rasterized ground plane. Voxel `(ix, iy)` has flat index `ix * Y + iy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for BevGridSpec {
    fn default() -> Self {
        Self {
            x_min: -51.2,
            x_max: 51.2,
            y_min: -51.2,
            y_max: 51.2,
            resolution: 0.8,
            z_min: -5.0,
            z_max: 3.0,
        }
    }
}

impl BevGridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) {
            return Err(Error::arg("BEV resolution must be positive"));
        }
        if !(self.z_min < self.z_max) {
            return Err(Error::arg("BEV z band is empty"));
        }
        for (lo, hi, axis) in [(self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")] {
            let cells = (hi - lo) / self.resolution;
            if !(cells >= 1.0 - 1e-9) {
                return Err(Error::arg(format!("BEV {axis} extent holds zero cells")));
            }
            if (cells - cells.round()).abs() > 1e-6 * cells.max(1.0) {
                return Err(Error::arg(format!(
                    "BEV {axis} extent {} is not a multiple of resolution {}",
                    hi - lo,
                    self.resolution
                )));
            }
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.resolution).round() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_max - self.y_min) / self.resolution).round() as usize
    }

    pub fn num_voxels(&self) -> usize {
        self.nx() * self.ny()
    }

    /// Flat voxel index of an ego point, or `None` outside the half-open box.
    #[inline]
    pub fn voxel_of(&self, x: f64, y: f64, z: f64) -> Option<u32> {
        let inside = x >= self.x_min
            && x < self.x_max
            && y >= self.y_min
            && y < self.y_max
            && z >= self.z_min
            && z < self.z_max;
        if !inside {
            return None;
        }
        let ix = (((x - self.x_min) / self.resolution).floor() as usize).min(self.nx() - 1);
        let iy = (((y - self.y_min) / self.resolution).floor() as usize).min(self.ny() - 1);
        Some((ix * self.ny() + iy) as u32)
    }

    /// Ego `(x, y)` of a cell center.
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.resolution,
            self.y_min + (iy as f64 + 0.5) * self.resolution,
        )
    }

    fn hash_into(&self, h: &mut Sha256) {
        for v in [
            self.x_min,
            self.x_max,
            self.y_min,
            self.y_max,
            self.resolution,
            self.z_min,
            self.z_max,
        ] {
            h.update(v.to_bits().to_le_bytes());
        }
    }
}

/// Per-pixel probability simplex over depth bins, `[D, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution(Tensor);

impl DepthDistribution {
    pub const SUM_TOLERANCE: f32 = 1e-5;

    pub fn new(probs: Tensor) -> Result<Self> {
        let (d, h, w) = probs.dims3()?;
        let plane = h * w;
        let x = probs.data();
        if x.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Numeric("depth probabilities must be non-negative".into()));
        }
        for p in 0..plane {
            let s: f32 = (0..d).map(|k| x[k * plane + p]).sum();
            if (s - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::Numeric(format!(
                    "depth column at pixel {p} sums to {s}"
                )));
            }
        }
        Ok(Self(probs))
    }

    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        Ok(Self(softmax_channel(logits)?))
    }

    pub fn uniform(bins: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self(Tensor::full(&[bins, h, w], 1.0 / bins as f32)?))
    }

    /// One-hot at `bin_of(pixel)` for every pixel.
    pub fn one_hot(bins: usize, h: usize, w: usize, bin_of: impl Fn(usize) -> usize) -> Result<Self> {
        let plane = h * w;
        let mut t = Tensor::zeros(&[bins, h, w])?;
        for p in 0..plane {
            let b = bin_of(p);
            if b >= bins {
                return Err(Error::arg(format!("bin {b} out of range for {bins} bins")));
            }
            t.data_mut()[b * plane + p] = 1.0;
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn bins(&self) -> usize {
        self.0.shape()[0]
    }
}

/// `out[d, c, i, j] = depth[d, i, j] * features[c, i, j]`.
pub fn lift(features: &Tensor, depth: &DepthDistribution) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    let (d, dh, dw) = depth.tensor().dims3()?;
    if (h, w) != (dh, dw) {
        return Err(Error::dim(format!(
            "features are {h}x{w} but depth is {dh}x{dw}"
        )));
    }
    let plane = h * w;
    let f = features.data();
    let p = depth.tensor().data();
    let mut out = Vec::with_capacity(d * c * plane);
    for k in 0..d {
        let pk = &p[k * plane..(k + 1) * plane];
        for ch in 0..c {
            let fc = &f[ch * plane..(ch + 1) * plane];
            out.extend(pk.iter().zip(fc).map(|(a, b)| a * b));
        }
    }
    Tensor::new(vec![d, c, h, w], out)
}

/// `w * predicted + (1 - w) * geometric`, renormalized per pixel.
pub fn fuse_depth(
    predicted: &DepthDistribution,
    geometric: &DepthDistribution,
    w: f32,
) -> Result<DepthDistribution> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::arg(format!("fusion weight must lie in [0, 1], got {w}")));
    }
    predicted.tensor().ensure_same_shape(geometric.tensor())?;
    let (d, h, wd) = predicted.tensor().dims3()?;
    let plane = h * wd;
    let a = predicted.tensor().data();
    let b = geometric.tensor().data();
    let mut out: Vec<f32> = a.iter().zip(b).map(|(p, g)| w * p + (1.0 - w) * g).collect();
    for p in 0..plane {
        let s: f32 = (0..d).map(|k| out[k * plane + p]).sum();
        if !(s > 0.0) {
            return Err(Error::Numeric(format!("fused depth column {p} has no mass")));
        }
        for k in 0..d {
            out[k * plane + p] /= s;
        }
    }
    DepthDistribution::new(Tensor::new(vec![d, h, wd], out)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LutShape {
    pub cams: usize,
    pub bins: usize,
    pub h: usize,
    pub w: usize,
    pub nx: usize,
    pub ny: usize,
}

impl LutShape {
    pub fn cells(&self) -> usize {
        self.cams * self.bins * self.h * self.w
    }

    pub fn voxels(&self) -> usize {
        self.nx * self.ny
    }
}

/// Immutable frustum-cell -> voxel map.
///
/// Frustum cell `((cam * bins + d) * h + i) * w + j` addresses depth bin
/// `d` at feature pixel `(i, j)` of camera `cam`.
///
/// The 64-bit fingerprint packs two 32-bit digests: the high half covers
/// the grid spec and shapes, the low half covers the frustum geometry
/// (rig, augmentation, depth bins). A splat can always check the high half
/// against its grid; callers holding the geometry check the whole value.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    shape: LutShape,
    fingerprint: u64,
    voxel_of: Vec<u32>,
    order: Vec<u32>,
    segment_offsets: Vec<u32>,
    segment_voxels: Vec<u32>,
}

impl LookupTable {
    pub fn shape(&self) -> LutShape {
        self.shape
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Voxel index per frustum cell, [`INVALID_VOXEL`] when outside the grid.
    pub fn voxel_indices(&self) -> &[u32] {
        &self.voxel_of
    }

    pub fn sorted_order(&self) -> &[u32] {
        &self.order
    }

    pub fn segment_bounds(&self) -> &[u32] {
        &self.segment_offsets
    }

    pub fn segment_voxels(&self) -> &[u32] {
        &self.segment_voxels
    }

    pub fn valid_count(&self) -> usize {
        self.order.len()
    }

    pub fn num_segments(&self) -> usize {
        self.segment_voxels.len()
    }

    /// Camera index owning frustum cell `cell`.
    pub fn camera_of_cell(&self, cell: usize) -> usize {
        cell / (self.shape.bins * self.shape.h * self.shape.w)
    }

    /// Checks that this table was built for `spec` and the recorded shapes.
    pub fn check_grid(&self, spec: &BevGridSpec) -> Result<()> {
        spec.validate()?;
        if (self.shape.nx, self.shape.ny) != (spec.nx(), spec.ny()) {
            return Err(Error::StaleLut(format!(
                "table grid {}x{} does not match spec grid {}x{}",
                self.shape.nx,
                self.shape.ny,
                spec.nx(),
                spec.ny()
            )));
        }
        if self.fingerprint >> 32 != grid_digest(spec, &self.shape) as u64 {
            return Err(Error::StaleLut(
                "table fingerprint does not match the BEV grid spec".into(),
            ));
        }
        Ok(())
    }

    /// Full fingerprint check against freshly built frustums.
    pub fn check_geometry(&self, frustums: &[Tensor], spec: &BevGridSpec) -> Result<()> {
        let shape = frustum_shape(frustums, spec)?;
        let expected = fingerprint(frustums, spec, &shape);
        if shape != self.shape || expected != self.fingerprint {
            return Err(Error::StaleLut(format!(
                "table fingerprint {:016x} does not match geometry {expected:016x}",
                self.fingerprint
            )));
        }
        Ok(())
    }

    fn from_sorted(shape: LutShape, fingerprint: u64, pairs: &[(u32, u32)]) -> Self {
        let mut voxel_of = vec![INVALID_VOXEL; shape.cells()];
        let mut order = Vec::with_capacity(pairs.len());
        let mut segment_offsets = Vec::new();
        let mut segment_voxels = Vec::new();
        for (k, &(cell, voxel)) in pairs.iter().enumerate() {
            voxel_of[cell as usize] = voxel;
            order.push(cell);
            if segment_voxels.last() != Some(&voxel) {
                segment_offsets.push(k as u32);
                segment_voxels.push(voxel);
            }
        }
        segment_offsets.push(pairs.len() as u32);
        Self {
            shape,
            fingerprint,
            voxel_of,
            order,
            segment_offsets,
            segment_voxels,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(LUT_MAGIC)?;
        w.write_all(&LUT_VERSION.to_le_bytes())?;
        let s = self.shape;
        for v in [s.cams, s.bins, s.h, s.w, s.nx, s.ny] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.fingerprint.to_le_bytes())?;
        w.write_all(&(self.order.len() as u64).to_le_bytes())?;
        for &cell in &self.order {
            w.write_all(&cell.to_le_bytes())?;
            w.write_all(&self.voxel_of[cell as usize].to_le_bytes())?;
        }
        w.write_all(&(self.segment_voxels.len() as u32).to_le_bytes())?;
        for &o in &self.segment_offsets {
            w.write_all(&o.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != LUT_MAGIC {
            return Err(Error::Format(format!(
                "bad LUT magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(&mut r)?;
        if version != LUT_VERSION {
            return Err(Error::Format(format!("unsupported LUT version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let shape = LutShape {
            cams: dims[0],
            bins: dims[1],
            h: dims[2],
            w: dims[3],
            nx: dims[4],
            ny: dims[5],
        };
        if dims.contains(&0) {
            return Err(Error::Format("LUT shape has a zero extent".into()));
        }
        let fingerprint = read_u64(&mut r)?;
        if fingerprint == 0 {
            return Err(Error::Format("LUT fingerprint is absent".into()));
        }
        let valid = read_u64(&mut r)? as usize;
        if valid > shape.cells() {
            return Err(Error::Format(format!(
                "LUT claims {valid} valid cells but only {} exist",
                shape.cells()
            )));
        }
        let mut pairs = Vec::with_capacity(valid);
        for _ in 0..valid {
            let cell = read_u32(&mut r)?;
            let voxel = read_u32(&mut r)?;
            if cell as usize >= shape.cells() || voxel as usize >= shape.voxels() {
                return Err(Error::Format(format!("LUT entry ({cell}, {voxel}) out of range")));
            }
            pairs.push((cell, voxel));
        }
        let segments = read_u32(&mut r)? as usize;
        if segments > valid {
            return Err(Error::Format("LUT segment count exceeds valid cells".into()));
        }
        let mut offsets = Vec::with_capacity(segments + 1);
        for _ in 0..=segments {
            offsets.push(read_u32(&mut r)?);
        }
        let lut = Self::from_sorted(shape, fingerprint, &pairs);
        let mut seen = vec![false; shape.cells()];
        for &(cell, _) in &pairs {
            if std::mem::replace(&mut seen[cell as usize], true) {
                return Err(Error::Format(format!("LUT lists cell {cell} twice")));
            }
        }
        let voxels_sorted = lut.segment_voxels.windows(2).all(|w| w[0] < w[1]);
        if lut.segment_offsets != offsets || !voxels_sorted {
            return Err(Error::Format(
                "LUT segment table is inconsistent with its entries".into(),
            ));
        }
        Ok(lut)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated LUT file".into()),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn frustum_shape(frustums: &[Tensor], spec: &BevGridSpec) -> Result<LutShape> {
    spec.validate()?;
    let first = frustums
        .first()
        .ok_or_else(|| Error::arg("need at least one camera frustum"))?;
    let (bins, h, w, three) = first.dims4()?;
    if three != 3 {
        return Err(Error::dim(format!("frustum last axis must be 3, got {three}")));
    }
    if let Some(bad) = frustums.iter().find(|f| f.shape() != first.shape()) {
        return Err(Error::dim(format!(
            "frustum shapes disagree: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let shape = LutShape {
        cams: frustums.len(),
        bins,
        h,
        w,
        nx: spec.nx(),
        ny: spec.ny(),
    };
    if shape.cells() > u32::MAX as usize || shape.voxels() >= INVALID_VOXEL as usize {
        return Err(Error::arg("lookup table too large for 32-bit indices"));
    }
    Ok(shape)
}

fn grid_digest(spec: &BevGridSpec, shape: &LutShape) -> u32 {
    let mut h = Sha256::new();
    h.update(b"grid");
    spec.hash_into(&mut h);
    for v in [shape.cams, shape.bins, shape.h, shape.w, shape.nx, shape.ny] {
        h.update((v as u64).to_le_bytes());
    }
    let d = h.finalize();
    u32::from_le_bytes([d[0], d[1], d[2], d[3]])
}

fn geometry_digest(frustums: &[Tensor]) -> u32 {
    let mut h = Sha256::new();
    h.update(b"geometry");
    for f in frustums {
        for &v in f.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let d = h.finalize();
    u32::from_le_bytes([d[0], d[1], d[2], d[3]])
}

fn fingerprint(frustums: &[Tensor], spec: &BevGridSpec, shape: &LutShape) -> u64 {
    // never zero: the file format reserves 0 for "absent"
    let fp = ((grid_digest(spec, shape) as u64) << 32) | geometry_digest(frustums) as u64;
    fp.max(1)
}

/// Bins every frustum point into the BEV grid and sorts valid cells by voxel.
pub fn precompute_lut(frustums: &[Tensor], spec: &BevGridSpec) -> Result<LookupTable> {
    let shape = frustum_shape(frustums, spec)?;
    let per_cam = shape.bins * shape.h * shape.w;
    let mut entries: Vec<(u32, u32, [f32; 3])> = frustums
        .par_iter()
        .enumerate()
        .flat_map_iter(|(cam, f)| {
            f.data().chunks_exact(3).enumerate().filter_map(move |(k, p)| {
                spec.voxel_of(p[0] as f64, p[1] as f64, p[2] as f64)
                    .map(|v| (v, (cam * per_cam + k) as u32, [p[0], p[1], p[2]]))
            })
        })
        .collect();
    entries.par_sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| cmp_point(&a.2, &b.2))
            .then_with(|| a.1.cmp(&b.1))
    });
    let pairs: Vec<(u32, u32)> = entries.iter().map(|&(v, c, _)| (c, v)).collect();
    Ok(LookupTable::from_sorted(
        shape,
        fingerprint(frustums, spec, &shape),
        &pairs,
    ))
}

fn cmp_point(a: &[f32; 3], b: &[f32; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then_with(|| a[1].total_cmp(&b[1]))
        .then_with(|| a[2].total_cmp(&b[2]))
}

fn check_inputs(
    features: &[Tensor],
    depths: &[DepthDistribution],
    shape: &LutShape,
) -> Result<usize> {
    if features.len() != shape.cams || depths.len() != shape.cams {
        return Err(Error::StaleLut(format!(
            "table covers {} cameras, got {} feature maps and {} depth maps",
            shape.cams,
            features.len(),
            depths.len()
        )));
    }
    let channels = features[0].dims3()?.0;
    for (f, d) in features.iter().zip(depths) {
        let (c, h, w) = f.dims3()?;
        if c != channels {
            return Err(Error::dim("cameras disagree on feature channel count"));
        }
        if (h, w) != (shape.h, shape.w) || d.tensor().shape() != [shape.bins, shape.h, shape.w] {
            return Err(Error::StaleLut(format!(
                "inputs ({h}x{w} features, depth {:?}) do not match table shape {:?}",
                d.tensor().shape(),
                shape
            )));
        }
    }
    Ok(channels)
}

/// Interleaves `[C, h, w]` camera maps into one `[cam, h*w, C]` buffer.
fn pixel_major(features: &[Tensor], channels: usize) -> Vec<f32> {
    let plane = features[0].len() / channels;
    let mut out = vec![0f32; features.len() * plane * channels];
    for (cam, f) in features.iter().enumerate() {
        let base = cam * plane * channels;
        for c in 0..channels {
            for (p, &v) in f.data()[c * plane..(c + 1) * plane].iter().enumerate() {
                out[base + p * channels + c] = v;
            }
        }
    }
    out
}

const SEGMENTS_PER_TASK: usize = 256;

/// Pools lifted features into `[C, X, Y]` using the table.
///
/// Each voxel is reduced sequentially in table order, so the result is
/// bit-identical for any worker count.
pub fn splat(
    features: &[Tensor],
    depths: &[DepthDistribution],
    lut: &LookupTable,
    spec: &BevGridSpec,
) -> Result<Tensor> {
    lut.check_grid(spec)?;
    let shape = lut.shape;
    let channels = check_inputs(features, depths, &shape)?;
    let plane = shape.h * shape.w;
    let per_cam = shape.bins * plane;
    let feats = pixel_major(features, channels);
    let depth: Vec<&[f32]> = depths.iter().map(|d| d.tensor().data()).collect();

    let nseg = lut.num_segments();
    let mut sums = vec![0f32; nseg * channels];
    sums.par_chunks_mut(SEGMENTS_PER_TASK * channels)
        .enumerate()
        .for_each(|(task, chunk)| {
            for (k, acc) in chunk.chunks_mut(channels).enumerate() {
                let seg = task * SEGMENTS_PER_TASK + k;
                let lo = lut.segment_offsets[seg] as usize;
                let hi = lut.segment_offsets[seg + 1] as usize;
                for &cell in &lut.order[lo..hi] {
                    let cell = cell as usize;
                    let cam = cell / per_cam;
                    let local = cell - cam * per_cam;
                    let p = depth[cam][local];
                    let pix = cam * plane + local % plane;
                    let f = &feats[pix * channels..(pix + 1) * channels];
                    for (a, &v) in acc.iter_mut().zip(f) {
                        *a += p * v;
                    }
                }
            }
        });

    let voxels = shape.voxels();
    let mut out = vec![0f32; channels * voxels];
    for (seg, &voxel) in lut.segment_voxels.iter().enumerate() {
        for c in 0..channels {
            out[c * voxels + voxel as usize] = sums[seg * channels + c];
        }
    }
    Tensor::new(vec![channels, shape.nx, shape.ny], out)
}

/// Everything needed to regenerate the frustum points of a rig.
#[derive(Debug, Clone)]
pub struct FrustumGeometry {
    pub rig: CameraRig,
    pub aug: AugTransform,
    pub bins: DepthBinSpec,
    pub feat_h: usize,
    pub feat_w: usize,
    pub downsample: usize,
}

impl FrustumGeometry {
    pub fn frustums(&self) -> Result<Vec<Tensor>> {
        self.rig
            .cameras()
            .par_iter()
            .map(|c| {
                build_frustum(
                    self.feat_h,
                    self.feat_w,
                    self.downsample,
                    &self.bins,
                    &c.intrinsics,
                    &c.extrinsics,
                    &self.aug,
                )
            })
            .collect()
    }

    pub fn build_lut(&self, spec: &BevGridSpec) -> Result<LookupTable> {
        precompute_lut(&self.frustums()?, spec)
    }
}

/// Baseline without a table: recomputes the frustum points, bins them and
/// scatter-adds every frame.
pub fn project_and_splat(
    features: &[Tensor],
    depths: &[DepthDistribution],
    geometry: &FrustumGeometry,
    spec: &BevGridSpec,
) -> Result<Tensor> {
    spec.validate()?;
    let (nx, ny) = (spec.nx(), spec.ny());
    let shape = LutShape {
        cams: geometry.rig.len(),
        bins: geometry.bins.num_bins,
        h: geometry.feat_h,
        w: geometry.feat_w,
        nx,
        ny,
    };
    let channels = check_inputs(features, depths, &shape)?;
    let voxels = nx * ny;
    let plane = shape.h * shape.w;
    let mut out = vec![0f32; channels * voxels];
    for ((f, d), camera) in features.iter().zip(depths).zip(geometry.rig.cameras()) {
        let frustum = build_frustum(
            geometry.feat_h,
            geometry.feat_w,
            geometry.downsample,
            &geometry.bins,
            &camera.intrinsics,
            &camera.extrinsics,
            &geometry.aug,
        )?;
        let fd = f.data();
        let dd = d.tensor().data();
        for (k, p) in frustum.data().chunks_exact(3).enumerate() {
            if let Some(v) = spec.voxel_of(p[0] as f64, p[1] as f64, p[2] as f64) {
                let prob = dd[k];
                let pix = k % plane;
                for c in 0..channels {
                    out[c * voxels + v as usize] += prob * fd[c * plane + pix];
                }
            }
        }
    }
    Tensor::new(vec![channels, nx, ny], out)
}
