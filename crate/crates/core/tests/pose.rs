use posemem::harness::synth_pose;
use posemem::posemath::{
    correct_sides, decode_argmax, encode_heatmap, kl_term, pair_loss, pair_terms, resolve_left_right, side_angle,
    Grid, HeatmapStack, PairKind, Pose, PoseError, LEFT_ARM, RIGHT_ARM,
};
use posemem::sslrefine::RigidTransform;
use proptest::prelude::*;

fn group(values: Vec<f64>, channels: usize) -> Vec<Vec<f64>> {
    let n = values.len() / channels;
    values.chunks(n).take(channels).map(|c| c.to_vec()).collect()
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|c| c.as_slice()).collect()
}

fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_recovers_nearest_voxel(p in [0.0..13.5f64, 0.0..13.5f64, 0.0..13.5f64], sigma in 0.5..4.0f64) {
        let grid = Grid::cubic(10, 1.5);
        let h = encode_heatmap(p, &grid, sigma).unwrap();
        prop_assert_eq!(decode_argmax(&h, &grid), grid.snap(p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kl_term_ignores_constant_shift(
        p in prop::collection::vec(-10.0..10.0f64, 12),
        g in prop::collection::vec(0.0..1.0f64, 12),
        k in -30.0..30.0f64,
    ) {
        let shifted: Vec<f64> = p.iter().map(|v| v + k).collect();
        let (p, s, g) = (group(p, 3), group(shifted, 3), group(g, 3));
        let d = kl_term(&refs(&s), &refs(&g)).unwrap() - kl_term(&refs(&p), &refs(&g)).unwrap();
        prop_assert!(d.abs() <= 1e-9);
    }

    #[test]
    fn pair_loss_is_swap_invariant_and_l1_is_a_minimum(
        vals in prop::collection::vec(-5.0..5.0f64, 16),
        weights in prop::collection::vec(0.0..1.0f64, 16),
    ) {
        let (pl, pr) = (group(vals[..8].to_vec(), 2), group(vals[8..].to_vec(), 2));
        let (gl, gr) = (group(weights[..8].to_vec(), 2), group(weights[8..].to_vec(), 2));
        let (a, b, x, y) = (refs(&pl), refs(&pr), refs(&gl), refs(&gr));
        prop_assert_eq!(pair_loss(&a, &b, &x, &y).unwrap(), pair_loss(&b, &a, &x, &y).unwrap());
        let t = pair_terms(&a, &b, &x, &y).unwrap();
        prop_assert!(t.l1 <= t.straight && t.l1 <= t.crossed);
    }

    #[test]
    fn resolver_is_rigid_invariant(
        seed in 0u64..10_000,
        axis in point(),
        angle in -3.1..3.1f64,
        shift in point(),
    ) {
        prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let pose = synth_pose(seed).truth;
        let t = RigidTransform { rotation: rotation(axis, angle), translation: shift };
        let moved = t.apply_pose(&pose);
        for kind in [PairKind::Arms, PairKind::Legs] {
            let (a, b) = kind.anchors();
            let before = resolve_left_right(pose.get(1), pose.get(4), pose.get(6), pose.get(a), pose.get(b), kind).unwrap();
            let after = resolve_left_right(moved.get(1), moved.get(4), moved.get(6), moved.get(a), moved.get(b), kind).unwrap();
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn correct_sides_undoes_a_swap(seed in 0u64..10_000) {
        let truth = synth_pose(seed).truth;
        let mut swapped = truth;
        for (l, r) in LEFT_ARM.iter().zip(&RIGHT_ARM) {
            swapped.set(*l, truth.get(*r));
            swapped.set(*r, truth.get(*l));
        }
        prop_assert_eq!(correct_sides(&mut swapped).unwrap(), vec![PairKind::Arms]);
        prop_assert_eq!(swapped, truth);
    }

    #[test]
    fn pose_csv_roundtrip(seed in any::<u64>()) {
        let pose = synth_pose(seed % 100_000).truth;
        prop_assert_eq!(Pose::from_csv(&pose.to_csv()).unwrap(), pose);
    }
}

#[test]
fn collinear_head_frame_is_degenerate() {
    let p = [1.0, 1.0, 1.0];
    let err = side_angle(p, [2.0, 2.0, 2.0], [3.0, 3.0, 3.0], [0.0; 3], [1.0, 0.0, 0.0]).unwrap_err();
    assert!(matches!(err, PoseError::DegenerateFrame));
}

#[test]
fn out_of_grid_points_are_rejected() {
    let grid = Grid::cubic(4, 1.0);
    assert!(matches!(encode_heatmap([5.0, 0.0, 0.0], &grid, 1.0), Err(PoseError::OutOfGrid { .. })));
}

#[test]
fn stack_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stack.bin");
    let pose = synth_pose(12).truth;
    let grid = Grid::cubic(28, 2.0);
    let stack = HeatmapStack::from_pose(&pose, &grid, 2.0).unwrap();
    stack.save(&path).unwrap();
    let back = HeatmapStack::load(&path).unwrap();
    assert_eq!(back.grid, stack.grid);
    assert_eq!(back.channels, stack.channels);
    let worst = back.data.iter().zip(&stack.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-7 * stack.data.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    assert_eq!(back.decode().unwrap(), stack.decode().unwrap());
}
