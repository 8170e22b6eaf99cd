use approx::assert_relative_eq;
use lidar_pose::geometry::{
    bev_iou, flip_scene, normalize_yaw, Box3D, FlipAxis, KeypointSet, KeypointState, Point, Scene, FLIP_PERMUTATION,
    NUM_KEYPOINTS,
};
use lidar_pose::metrics::hungarian;
use lidar_pose::optim::OneCycle;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = Box3D> {
    (-20.0..20.0f64, -20.0..20.0f64, 0.2..2.0f64, 0.2..2.0f64, -3.2..3.2f64)
        .prop_map(|(x, y, l, w, yaw)| Box3D::pedestrian([x, y, 0.9], [l, w, 1.8], yaw).unwrap())
}

fn arb_scene() -> impl Strategy<Value = Scene> {
    (
        prop::collection::vec(prop::array::uniform3(-30.0..30.0f64), 0..40),
        prop::collection::vec(arb_box(), 0..4),
        any::<u64>(),
    )
        .prop_map(|(pts, boxes, bits)| {
            let keypoints = boxes
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let states = std::array::from_fn(|j| match (bits >> ((i * 14 + j) % 60)) & 3 {
                        0 => KeypointState::Absent,
                        1 => KeypointState::Occluded,
                        _ => KeypointState::Visible,
                    });
                    Some(KeypointSet::new(
                        std::array::from_fn(|j| [b.center[0] + 0.01 * j as f64, b.center[1] - 0.02 * j as f64, 0.1 * j as f64]),
                        states,
                    ))
                })
                .collect();
            Scene {
                id: "p".into(),
                points: pts.into_iter().map(|p| Point::new(p, 0.5, 0.1, 0.0)).collect(),
                boxes,
                keypoints,
            }
        })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

proptest! {
    #[test]
    fn x_flip_is_an_exact_involution(scene in arb_scene()) {
        let twice = flip_scene(&flip_scene(&scene, FlipAxis::X), FlipAxis::X);
        prop_assert_eq!(twice, scene);
    }

    #[test]
    fn y_flip_restores_everything_but_yaw_rounding(scene in arb_scene()) {
        let twice = flip_scene(&flip_scene(&scene, FlipAxis::Y), FlipAxis::Y);
        prop_assert_eq!(&twice.points, &scene.points);
        prop_assert_eq!(&twice.keypoints, &scene.keypoints);
        for (a, b) in twice.boxes.iter().zip(&scene.boxes) {
            prop_assert_eq!(a.center, b.center);
            prop_assert!((a.yaw - b.yaw).abs() <= f64::EPSILON * 4.0);
        }
    }

    #[test]
    fn local_world_round_trip(b in arb_box(), p in prop::array::uniform3(-30.0..30.0f64)) {
        let back = b.to_world(b.to_local(p));
        for i in 0..3 {
            assert_relative_eq!(back[i], p[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn normalized_yaw_keeps_direction(yaw in -50.0..50.0f64) {
        let n = normalize_yaw(yaw);
        prop_assert!(n > -std::f64::consts::PI && n <= std::f64::consts::PI);
        assert_relative_eq!(n.sin(), yaw.sin(), epsilon = 1e-9);
        assert_relative_eq!(n.cos(), yaw.cos(), epsilon = 1e-9);
    }

    #[test]
    fn bev_iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = bev_iou(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        assert_relative_eq!(ab, bev_iou(&b, &a), epsilon = 1e-9);
        assert_relative_eq!(bev_iou(&a, &a), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn hungarian_is_optimal(rows in 1usize..5, extra in 0usize..3, costs in prop::collection::vec(0.0..10.0f64, 64)) {
        let cols = rows + extra;
        let cost: Vec<Vec<f64>> = (0..rows).map(|r| (0..cols).map(|c| costs[r * 8 + c]).collect()).collect();
        let got = hungarian(&cost);
        let got_total: f64 = got.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        let best = permutations(cols)
            .iter()
            .map(|p| (0..rows).map(|r| cost[r][p[r]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(got_total, best, epsilon = 1e-9);
    }

    #[test]
    fn one_cycle_stays_in_range(total in 1usize..500, step in 0usize..600) {
        let s = OneCycle { max_lr: 1e-3, total_steps: total, ..Default::default() };
        let lr = s.lr(step.min(total - 1));
        prop_assert!(lr > 0.0 && lr <= 1e-3 + 1e-15);
        let m = s.momentum(step.min(total - 1));
        prop_assert!((0.85 - 1e-12..=0.95 + 1e-12).contains(&m));
    }
}

#[test]
fn flip_permutation_is_an_involution_fixing_head_and_nose() {
    let fixed: Vec<usize> = (0..NUM_KEYPOINTS).filter(|&i| FLIP_PERMUTATION[i] == i).collect();
    assert_eq!(fixed, vec![0, 13]);
    for i in 0..NUM_KEYPOINTS {
        assert_eq!(FLIP_PERMUTATION[FLIP_PERMUTATION[i]], i);
    }
}
