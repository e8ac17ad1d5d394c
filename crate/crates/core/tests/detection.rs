mod common;

use bevkit_core::head::{circular_nms, decode, total_loss, Detection, HeadOutput, LossWeights, NmsRadii};
use bevkit_core::lift_splat::BevGridSpec;
use bevkit_core::Tensor;
use common::{nms_oracle, random_nms_instance};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn nms_matches_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let (dets, radii) = random_nms_instance(&mut rng);
        assert_eq!(circular_nms(&dets, &radii).unwrap(), nms_oracle(&dets, &radii));
    }
}

fn det_strategy() -> impl Strategy<Value = Detection> {
    (-10.0..10.0f64, -10.0..10.0f64, 0.0..=1.0f64, 0usize..3).prop_map(|(x, y, score, class_id)| Detection {
        x,
        y,
        z: 0.0,
        w: 1.0,
        l: 1.0,
        h: 1.0,
        yaw: 0.0,
        vx: 0.0,
        vy: 0.0,
        score,
        class_id,
    })
}

proptest! {
    #[test]
    fn nms_output_properties(dets in prop::collection::vec(det_strategy(), 0..60), r in 0.1..3.0f64) {
        let radii = NmsRadii::uniform(3, r).unwrap();
        let kept = circular_nms(&dets, &radii).unwrap();
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for pair in kept.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!((a.x - b.x).hypot(a.y - b.y) >= r * (1.0 - 1e-12));
                }
            }
        }
    }

    #[test]
    fn total_loss_is_linear_and_scales_with_n(
        l in prop::array::uniform3(0.0..100.0f64),
        w in prop::array::uniform3(0.0..5.0f64),
        n in 1.0..50.0f64,
        k in 1.0..10.0f64,
    ) {
        let lw = LossWeights { alpha: w[0], beta: w[1], gamma: w[2], n };
        let base = total_loss(l[0], l[1], l[2], &lw).unwrap();
        let direct = (w[0] * l[0] + w[1] * l[1] + w[2] * l[2]) / n;
        prop_assert!((base - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        let doubled = total_loss(2.0 * l[0], l[1], l[2], &lw).unwrap();
        prop_assert!((doubled - base - w[0] * l[0] / n).abs() <= 1e-9 * (1.0 + base.abs()));
        let wider = total_loss(l[0], l[1], l[2], &LossWeights { n: n * k, ..lw }).unwrap();
        prop_assert!((wider * k - base).abs() <= 1e-9 * (1.0 + base.abs()));
    }

    #[test]
    fn decode_ignores_raised_background(
        peaks in prop::collection::btree_set((0usize..12, 0usize..12), 1..5),
        values in prop::collection::vec(0.6..1.0f32, 5),
        lift in 0.0..0.3f32,
    ) {
        let spec = BevGridSpec { x_min: 0.0, x_max: 12.0, y_min: 0.0, y_max: 12.0, z_min: -1.0, z_max: 1.0, resolution: 1.0 };
        let thresh = 0.4;
        let mut heat = Tensor::full(&[1, 12, 12], 0.05).unwrap();
        let peak_cells: Vec<(usize, usize)> = peaks.into_iter().collect();
        for (k, &(i, j)) in peak_cells.iter().enumerate() {
            heat.data_mut()[i * 12 + j] = values[k];
        }
        let out = |heat: Tensor| {
            let z = |c| Tensor::zeros(&[c, 12, 12]).unwrap();
            HeadOutput::new(heat, z(2), z(1), z(3), z(2), z(2)).unwrap()
        };
        let before = decode(&out(heat.clone()), &spec, 20, thresh);
        // raise every non-peak cell, staying below the threshold
        let mut raised = heat.clone();
        for (p, v) in raised.data_mut().iter_mut().enumerate() {
            if !peak_cells.contains(&(p / 12, p % 12)) {
                *v = (*v + lift).min(thresh);
            }
        }
        prop_assert_eq!(before, decode(&out(raised), &spec, 20, thresh));
    }
}
