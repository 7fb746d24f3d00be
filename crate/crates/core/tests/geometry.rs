mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textdet::geometry::{
    decode_offsets, encode_offsets, iou, iou_axis_aligned, iou_rotated, nms, normalize_theta, Detection, IouMode,
    OrientedBox,
};

fn boxes() -> impl Strategy<Value = OrientedBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..40.0f64, 0.5..40.0f64, -3.2..3.2f64)
        .prop_map(|(cx, cy, w, h, t)| OrientedBox::new(cx, cy, w, h, t).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let ab = iou_rotated(&a, &b).unwrap();
        let ba = iou_rotated(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn self_overlap_is_one(a in boxes()) {
        prop_assert!((iou_rotated(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn overlap_is_invariant_under_rigid_motion(a in boxes(), b in boxes(), t in -3.0..3.0f64, dx in -50.0..50.0f64) {
        let (s, c) = t.sin_cos();
        let mv = |x: &OrientedBox| OrientedBox::new(
            x.cx * c - x.cy * s + dx, x.cx * s + x.cy * c, x.w, x.h, x.theta + t).unwrap();
        let before = iou_rotated(&a, &b).unwrap();
        let after = iou_rotated(&mv(&a), &mv(&b)).unwrap();
        prop_assert!((before - after).abs() < 1e-7, "{before} {after}");
    }

    #[test]
    fn axis_aligned_paths_agree(cx in 0.0..50.0f64, cy in 0.0..50.0f64, w in 1.0..20.0f64, h in 1.0..20.0f64, b in boxes()) {
        let a = OrientedBox::axis_aligned(cx, cy, w, h);
        let b = OrientedBox::axis_aligned(b.cx, b.cy, b.w, b.h);
        let x = iou_axis_aligned(&a, &b).unwrap();
        prop_assert!((x - iou_rotated(&a, &b).unwrap()).abs() < 1e-12);
        prop_assert!((x - iou(&a, &b, IouMode::Enclosing).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn offsets_round_trip(gt in boxes(), acx in 0.0..100.0f64, acy in 0.0..100.0f64, aw in 1.0..50.0f64, ah in 1.0..50.0f64) {
        let anchor = OrientedBox::axis_aligned(acx, acy, aw, ah);
        let back = decode_offsets(&encode_offsets(&gt, &anchor).unwrap(), &anchor);
        for (x, y) in [(back.cx, gt.cx), (back.cy, gt.cy), (back.w, gt.w), (back.h, gt.h), (back.theta, gt.theta)] {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn theta_lands_in_half_open_range(t in -100.0..100.0f64) {
        let n = normalize_theta(t);
        prop_assert!(n > -std::f64::consts::FRAC_PI_2 && n <= std::f64::consts::FRAC_PI_2);
        prop_assert!(((t - n) / std::f64::consts::PI - ((t - n) / std::f64::consts::PI).round()).abs() < 1e-9);
    }
}

#[test]
fn enclosing_mode_uses_bounding_rectangles() {
    let a = OrientedBox::new(0.0, 0.0, 2.0, 2.0, std::f64::consts::FRAC_PI_4).unwrap();
    let b = OrientedBox::axis_aligned(0.0, 0.0, 2f64.sqrt() * 2.0, 2f64.sqrt() * 2.0);
    assert!((iou(&a, &b, IouMode::Enclosing).unwrap() - 1.0).abs() < 1e-12);
    assert!((iou(&a, &b, IouMode::Rotated).unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn nms_keeps_disjoint_and_drops_duplicates() {
    let a = OrientedBox::axis_aligned(10.0, 10.0, 10.0, 4.0);
    let dets = vec![
        Detection::new(a, 0.6).unwrap(),
        Detection::new(OrientedBox { cx: 10.5, ..a }, 0.9).unwrap(),
        Detection::new(OrientedBox { cx: 50.0, ..a }, 0.8).unwrap(),
    ];
    let kept = nms(&dets, 0.3);
    assert_eq!(kept.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.9, 0.8]);
}

#[test]
fn nms_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let dets: Vec<Detection> = (0..rng.gen_range(0..15))
            .map(|_| Detection::new(common::random_box(&mut rng, 40.0, true), rng.gen()).unwrap())
            .collect();
        let once = nms(&dets, 0.3);
        assert_eq!(nms(&once, 0.3), once);
    }
}
