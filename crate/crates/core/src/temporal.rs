//! Temporal fusion of historical BEV maps.
//!
//! Past maps are kept in a time-windowed buffer, resampled into the current
//! ego frame with bilinear interpolation, and stacked behind the current
//! map (newest history first). Missing history is zero-filled so the
//! stacked channel count never changes.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init;
use crate::lift_splat::BevGridSpec;
use crate::ops::ResidualBlock;
use crate::tensor::Tensor;

pub const DEFAULT_WINDOW_SECONDS: f64 = 2.0;
pub const DEFAULT_MAX_FRAMES: usize = 4;

/// Planar ego pose in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    yaw: f64,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Heading in `(-pi, pi]`.
    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn to_global(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }

    pub fn to_local(&self, gx: f64, gy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (gx - self.x, gy - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferedFrame {
    pub timestamp: f64,
    pub pose: EgoPose,
    pub bev: Tensor,
}

#[derive(Debug, Clone)]
pub struct FrameBuffer {
    capacity_seconds: f64,
    entries: VecDeque<BufferedFrame>,
}

impl Default for FrameBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW_SECONDS).expect("default window is positive")
    }
}

impl FrameBuffer {
    pub fn new(capacity_seconds: f64) -> Result<Self> {
        if !(capacity_seconds > 0.0) {
            return Err(Error::arg("temporal window must be positive"));
        }
        Ok(Self {
            capacity_seconds,
            entries: VecDeque::new(),
        })
    }

    pub fn capacity_seconds(&self) -> f64 {
        self.capacity_seconds
    }

    /// Oldest first.
    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &BufferedFrame> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn newest_timestamp(&self) -> Option<f64> {
        self.entries.back().map(|e| e.timestamp)
    }

    /// Drops entries with `timestamp <= now - capacity`.
    pub fn evict(&mut self, now: f64) {
        let cutoff = now - self.capacity_seconds;
        while self.entries.front().is_some_and(|e| e.timestamp <= cutoff) {
            self.entries.pop_front();
        }
    }

    pub fn push_frame(&mut self, timestamp: f64, pose: EgoPose, bev: Tensor) -> Result<()> {
        if let Some(newest) = self.newest_timestamp() {
            if !(timestamp > newest) {
                return Err(Error::arg(format!(
                    "timestamps must increase: {timestamp} after {newest}"
                )));
            }
        }
        if let Some(prev) = self.entries.back() {
            prev.bev.ensure_same_shape(&bev)?;
        }
        self.entries.push_back(BufferedFrame {
            timestamp,
            pose,
            bev,
        });
        self.evict(timestamp);
        Ok(())
    }
}

/// Resamples `bev` (expressed in `from_pose`) into the `to_pose` frame.
pub fn warp_bev(bev: &Tensor, from_pose: &EgoPose, to_pose: &EgoPose, spec: &BevGridSpec) -> Result<Tensor> {
    let (c, nx, ny) = bev.dims3()?;
    if (nx, ny) != (spec.nx(), spec.ny()) {
        return Err(Error::dim(format!(
            "BEV map is {nx}x{ny}, grid spec is {}x{}",
            spec.nx(),
            spec.ny()
        )));
    }
    let plane = nx * ny;
    let src = bev.data();
    // (corner flat index, weight) per target cell; shared across channels
    let taps: Vec<[(usize, f32); 4]> = (0..plane)
        .into_par_iter()
        .map(|cell| {
            let (ix, iy) = (cell / ny, cell % ny);
            let (lx, ly) = spec.cell_center(ix, iy);
            let (gx, gy) = to_pose.to_global(lx, ly);
            let (sx, sy) = from_pose.to_local(gx, gy);
            let fi = (sx - spec.x_min) / spec.resolution - 0.5;
            let fj = (sy - spec.y_min) / spec.resolution - 0.5;
            let (i0, j0) = (fi.floor(), fj.floor());
            let (a, b) = (fi - i0, fj - j0);
            let mut out = [(0usize, 0f32); 4];
            let corners = [
                (i0, j0, (1.0 - a) * (1.0 - b)),
                (i0 + 1.0, j0, a * (1.0 - b)),
                (i0, j0 + 1.0, (1.0 - a) * b),
                (i0 + 1.0, j0 + 1.0, a * b),
            ];
            for (slot, (ci, cj, wgt)) in out.iter_mut().zip(corners) {
                if ci >= 0.0 && cj >= 0.0 && (ci as usize) < nx && (cj as usize) < ny {
                    *slot = (ci as usize * ny + cj as usize, wgt as f32);
                }
            }
            out
        })
        .collect();
    let mut out = vec![0f32; c * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(ch, dst)| {
        let s = &src[ch * plane..(ch + 1) * plane];
        for (d, tap) in dst.iter_mut().zip(&taps) {
            *d = tap.iter().map(|&(k, w)| w * s[k]).sum();
        }
    });
    Tensor::new(vec![c, nx, ny], out)
}

/// Stacks the current map with up to `max_frames` warped history maps,
/// newest first, zero-padding the shortfall.
pub fn align_and_concat(
    buf: &FrameBuffer,
    current_pose: &EgoPose,
    current_bev: &Tensor,
    max_frames: usize,
    spec: &BevGridSpec,
) -> Result<Tensor> {
    let (c, nx, ny) = current_bev.dims3()?;
    let plane = c * nx * ny;
    let history: Vec<&BufferedFrame> = buf.entries().rev().take(max_frames).collect();
    let warped: Vec<Tensor> = history
        .par_iter()
        .map(|f| {
            f.bev.ensure_same_shape(current_bev)?;
            warp_bev(&f.bev, &f.pose, current_pose, spec)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity((1 + max_frames) * plane);
    out.extend_from_slice(current_bev.data());
    for w in &warped {
        out.extend_from_slice(w.data());
    }
    out.resize((1 + max_frames) * plane, 0.0);
    Tensor::new(vec![(1 + max_frames) * c, nx, ny], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevEncoderWeights {
    pub blocks: [ResidualBlock; 2],
}

impl BevEncoderWeights {
    pub fn new(blocks: [ResidualBlock; 2]) -> Result<Self> {
        if blocks[0].channels() != blocks[1].channels() {
            return Err(Error::dim("BEV encoder blocks disagree on channel count"));
        }
        Ok(Self { blocks })
    }

    pub fn random(channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new([
            init::residual_block(&mut rng, channels, init::INIT_SCALE)?,
            init::residual_block(&mut rng, channels, init::INIT_SCALE)?,
        ])
    }

    pub fn zero(channels: usize) -> Result<Self> {
        Self::new([init::zero_residual_block(channels)?, init::zero_residual_block(channels)?])
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].channels()
    }
}

pub fn bev_encoder_forward(stacked: &Tensor, wts: &BevEncoderWeights) -> Result<Tensor> {
    let (c, _, _) = stacked.dims3()?;
    if c != wts.channels() {
        return Err(Error::dim(format!(
            "BEV encoder expects {} channels, got {c}",
            wts.channels()
        )));
    }
    let x = wts.blocks[0].forward(stacked)?;
    wts.blocks[1].forward(&x)
}
