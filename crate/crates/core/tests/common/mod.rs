//! Brute-force oracles and random instance generators shared by the
//! integration tests. Nothing here calls the code under test except to
//! construct inputs.

#![allow(dead_code)]

use bevkit_core::head::{Detection, NmsRadii};
use bevkit_core::lift_splat::{BevGridSpec, DepthDistribution};
use bevkit_core::Tensor;
use rand::Rng;

pub struct SplatInstance {
    pub frustums: Vec<Tensor>,
    pub features: Vec<Tensor>,
    pub depths: Vec<DepthDistribution>,
    pub spec: BevGridSpec,
}

/// Random points around a random grid, some of them snapped onto cell
/// edges and the upper bounds to exercise the half-open convention.
pub fn random_splat_instance<R: Rng>(rng: &mut R) -> SplatInstance {
    let cams = rng.gen_range(1..=4);
    let bins = rng.gen_range(1..=16);
    let h = rng.gen_range(1..=16);
    let w = rng.gen_range(1..=16);
    let channels = rng.gen_range(1..=4);
    let res = [0.25, 0.5, 1.0, 2.0][rng.gen_range(0..4)];
    let nx = rng.gen_range(1..=64);
    let ny = rng.gen_range(1..=64);
    let x_min = rng.gen_range(-20..0) as f64;
    let y_min = rng.gen_range(-20..0) as f64;
    let spec = BevGridSpec {
        x_min,
        x_max: x_min + nx as f64 * res,
        y_min,
        y_max: y_min + ny as f64 * res,
        z_min: -2.0,
        z_max: 2.0,
        resolution: res,
    };
    let coord = |rng: &mut R, lo: f64, hi: f64, step: f64| -> f32 {
        match rng.gen_range(0..10) {
            0 => (lo + rng.gen_range(0..=((hi - lo) / step) as i64) as f64 * step) as f32,
            1 => hi as f32,
            _ => rng.gen_range(lo - 2.0 * step..hi + 2.0 * step) as f32,
        }
    };
    let frustums = (0..cams)
        .map(|_| {
            let mut data = Vec::with_capacity(bins * h * w * 3);
            for _ in 0..bins * h * w {
                data.push(coord(rng, spec.x_min, spec.x_max, res));
                data.push(coord(rng, spec.y_min, spec.y_max, res));
                data.push(coord(rng, spec.z_min, spec.z_max, 1.0));
            }
            Tensor::new(vec![bins, h, w, 3], data).unwrap()
        })
        .collect();
    let features = (0..cams)
        .map(|_| Tensor::from_fn(&[channels, h, w], |_| rng.gen_range(-1.0..1.0)).unwrap())
        .collect();
    let depths = (0..cams)
        .map(|_| {
            let logits = Tensor::from_fn(&[bins, h, w], |_| rng.gen_range(-3.0..3.0)).unwrap();
            DepthDistribution::from_logits(&logits).unwrap()
        })
        .collect();
    SplatInstance {
        frustums,
        features,
        depths,
        spec,
    }
}

/// Direct scatter in f64: every frustum point is binned on its own and its
/// lifted feature added to the voxel.
pub fn naive_scatter(inst: &SplatInstance) -> Vec<f64> {
    let s = &inst.spec;
    let nx = ((s.x_max - s.x_min) / s.resolution).round() as usize;
    let ny = ((s.y_max - s.y_min) / s.resolution).round() as usize;
    let channels = inst.features[0].shape()[0];
    let mut out = vec![0f64; channels * nx * ny];
    for ((fr, feat), depth) in inst.frustums.iter().zip(&inst.features).zip(&inst.depths) {
        let (h, w) = (fr.shape()[1], fr.shape()[2]);
        let plane = h * w;
        for (k, p) in fr.data().chunks_exact(3).enumerate() {
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            if x < s.x_min || x >= s.x_max || y < s.y_min || y >= s.y_max || z < s.z_min || z >= s.z_max {
                continue;
            }
            let ix = (((x - s.x_min) / s.resolution).floor() as usize).min(nx - 1);
            let iy = (((y - s.y_min) / s.resolution).floor() as usize).min(ny - 1);
            let prob = depth.tensor().data()[k] as f64;
            let pix = k % plane;
            for c in 0..channels {
                out[(c * nx + ix) * ny + iy] += prob * feat.data()[c * plane + pix] as f64;
            }
        }
    }
    out
}

pub fn max_abs_err(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Random detections on a half-meter lattice so that distances hit the
/// radii exactly now and then; scores on a coarse grid to force ties.
pub fn random_nms_instance<R: Rng>(rng: &mut R) -> (Vec<Detection>, NmsRadii) {
    let classes = rng.gen_range(1..=4);
    let n = rng.gen_range(0..=200);
    let extent = rng.gen_range(2..=20) as f64;
    let dets = (0..n)
        .map(|_| Detection {
            x: (rng.gen_range(-extent..extent) * 2.0).round() / 2.0,
            y: (rng.gen_range(-extent..extent) * 2.0).round() / 2.0,
            z: 0.0,
            w: 1.0,
            l: 1.0,
            h: 1.0,
            yaw: 0.0,
            vx: 0.0,
            vy: 0.0,
            score: rng.gen_range(0..=20) as f64 / 20.0,
            class_id: rng.gen_range(0..classes),
        })
        .collect();
    let radii = NmsRadii::new((0..classes).map(|c| (c, [0.5, 1.0, 2.5, 4.0][rng.gen_range(0..4)])).collect()).unwrap();
    (dets, radii)
}

/// All-pairs greedy suppression, single pass, no grouping by class.
pub fn nms_oracle(dets: &[Detection], radii: &NmsRadii) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable sort keeps input order among equal scores
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let r = radii.0[&dets[i].class_id];
        let suppressed = kept.iter().any(|&j| {
            dets[j].class_id == dets[i].class_id
                && ((dets[j].x - dets[i].x).powi(2) + (dets[j].y - dets[i].y).powi(2)).sqrt() < r
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

/// `(H + 2p - k) / s + 1` per axis.
pub fn conv_out(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}
