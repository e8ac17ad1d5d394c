use bevkit_core::lift_splat::BevGridSpec;
use bevkit_core::temporal::{warp_bev, EgoPose};
use bevkit_core::Tensor;
use proptest::prelude::*;

fn grid(n: usize, res: f64) -> BevGridSpec {
    let half = n as f64 * res / 2.0;
    BevGridSpec {
        x_min: -half,
        x_max: half,
        y_min: -half,
        y_max: half,
        z_min: -5.0,
        z_max: 3.0,
        resolution: res,
    }
}

/// `a * x + b * y + c` sampled at cell centers of `spec`.
fn linear_field(spec: &BevGridSpec, a: f64, b: f64, c: f64) -> Tensor {
    let ny = spec.ny();
    Tensor::from_fn(&[1, spec.nx(), ny], |k| {
        let (x, y) = spec.cell_center(k / ny, k % ny);
        (a * x + b * y + c) as f32
    })
    .unwrap()
}

/// Cells at least `margin` cells away from the border.
fn interior(spec: &BevGridSpec, margin: usize) -> impl Iterator<Item = usize> + '_ {
    let (nx, ny) = (spec.nx(), spec.ny());
    (margin..nx - margin).flat_map(move |i| (margin..ny - margin).map(move |j| i * ny + j))
}

#[test]
fn one_cell_forward_motion_shifts_by_one_row() {
    let spec = grid(16, 0.5);
    let bev = Tensor::from_fn(&[2, 16, 16], |k| (k as f32 * 0.37).sin()).unwrap();
    let from = EgoPose::identity();
    let to = EgoPose::new(0.5, 0.0, 0.0);
    let w = warp_bev(&bev, &from, &to, &spec).unwrap();
    for c in 0..2 {
        for i in 0..15 {
            for j in 0..16 {
                let got = w.data()[(c * 16 + i) * 16 + j];
                let want = bev.data()[(c * 16 + i + 1) * 16 + j];
                assert!((got - want).abs() <= 1e-4);
            }
        }
        // the last row came from outside the old map
        assert!((0..16).all(|j| w.data()[(c * 16 + 15) * 16 + j] == 0.0));
    }
}

#[test]
fn one_cell_sideways_motion_shifts_by_one_column() {
    let spec = grid(12, 1.0);
    let bev = Tensor::from_fn(&[1, 12, 12], |k| k as f32).unwrap();
    let w = warp_bev(&bev, &EgoPose::identity(), &EgoPose::new(0.0, -1.0, 0.0), &spec).unwrap();
    for i in 0..12 {
        for j in 1..12 {
            assert!((w.data()[i * 12 + j] - bev.data()[i * 12 + j - 1]).abs() <= 1e-4);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Bilinear resampling reproduces linear fields, so a round trip returns
    /// the input wherever both sampling steps stay inside the map.
    #[test]
    fn round_trip_restores_interior(
        a in -1.0..1.0f64, b in -1.0..1.0f64, c in -5.0..5.0f64,
        dx in -1.5..1.5f64, dy in -1.5..1.5f64, dyaw in -0.2..0.2f64,
        gx in -20.0..20.0f64, gy in -20.0..20.0f64, gyaw in -3.1..3.1f64,
    ) {
        let spec = grid(32, 0.5);
        let bev = linear_field(&spec, a, b, c);
        let p0 = EgoPose::new(gx, gy, gyaw);
        let p1 = EgoPose::new(gx + dx, gy + dy, gyaw + dyaw);
        let there = warp_bev(&bev, &p0, &p1, &spec).unwrap();
        let back = warp_bev(&there, &p1, &p0, &spec).unwrap();
        for k in interior(&spec, 10) {
            prop_assert!((back.data()[k] - bev.data()[k]).abs() <= 1e-4, "cell {} {} vs {}", k, back.data()[k], bev.data()[k]);
        }
    }

    #[test]
    fn warp_of_linear_field_is_the_moved_field(
        a in -1.0..1.0f64, b in -1.0..1.0f64, c in -5.0..5.0f64,
        dx in -2.0..2.0f64, dy in -2.0..2.0f64, dyaw in -0.3..0.3f64,
    ) {
        let spec = grid(32, 0.5);
        let bev = linear_field(&spec, a, b, c);
        let from = EgoPose::identity();
        let to = EgoPose::new(dx, dy, dyaw);
        let w = warp_bev(&bev, &from, &to, &spec).unwrap();
        let ny = spec.ny();
        for k in interior(&spec, 10) {
            let (x, y) = spec.cell_center(k / ny, k % ny);
            let (gx, gy) = to.to_global(x, y);
            let (sx, sy) = from.to_local(gx, gy);
            let want = a * sx + b * sy + c;
            prop_assert!((w.data()[k] as f64 - want).abs() <= 1e-4);
        }
    }

    #[test]
    fn identical_poses_are_identity(x in -50.0..50.0f64, y in -50.0..50.0f64, yaw in -3.1..3.1f64) {
        let spec = grid(8, 1.0);
        let bev = Tensor::from_fn(&[3, 8, 8], |k| (k as f32).cos()).unwrap();
        let p = EgoPose::new(x, y, yaw);
        let w = warp_bev(&bev, &p, &p, &spec).unwrap();
        prop_assert!(w.max_abs_diff(&bev).unwrap() <= 1e-4);
    }
}
