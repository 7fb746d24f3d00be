mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textdet::geometry::{iou, Detection, IouMode, OrientedBox};
use textdet::toolkit::{evaluate_detections, generate_scene, match_image, read_dataset, write_dataset, GenConfig};

#[test]
fn same_seed_same_scene() {
    let cfg = GenConfig {
        max_rotation: 0.6,
        ..GenConfig::default()
    };
    for seed in 0..5 {
        let (a, b) = (generate_scene(seed, &cfg).unwrap(), generate_scene(seed, &cfg).unwrap());
        let bits = |s: &textdet::toolkit::SceneSample| s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.mask, b.mask);
    }
    assert_ne!(
        generate_scene(0, &cfg).unwrap().image,
        generate_scene(1, &cfg).unwrap().image
    );
}

#[test]
fn zero_rotation_range_gives_upright_words() {
    let cfg = GenConfig::default();
    for seed in 0..20 {
        assert!(generate_scene(seed, &cfg).unwrap().boxes.iter().all(|b| b.theta == 0.0));
    }
}

#[test]
fn rotated_words_stay_inside_and_use_the_range() {
    let cfg = GenConfig {
        max_rotation: 0.5,
        ..GenConfig::default()
    };
    let mut any = false;
    for seed in 0..20 {
        for b in generate_scene(seed, &cfg).unwrap().boxes {
            assert!(b.theta.abs() <= 0.5);
            any |= b.theta != 0.0;
            let (x0, y0, x1, y1) = b.extent();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 128.0 && y1 <= 128.0);
        }
    }
    assert!(any);
}

#[test]
fn mask_count_tracks_box_area() {
    for rot in [0.0, 0.7] {
        let cfg = GenConfig {
            max_rotation: rot,
            size: 256,
            ..GenConfig::default()
        };
        let (mut count, mut area) = (0.0, 0.0);
        for seed in 0..10 {
            let s = generate_scene(seed, &cfg).unwrap();
            count += s.mask_count() as f64;
            area += s.boxes.iter().map(|b| b.area()).sum::<f64>();
        }
        assert!((count - area).abs() <= 0.02 * area, "rotation {rot}: {count} vs {area}");
    }
}

#[test]
fn invalid_generator_settings_are_rejected() {
    let bad = GenConfig {
        min_words: 5,
        max_words: 2,
        ..GenConfig::default()
    };
    assert!(generate_scene(0, &bad).is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let cfg = GenConfig {
        max_rotation: 0.4,
        ..GenConfig::default()
    };
    let samples: Vec<_> = (0..4).map(|i| generate_scene(i, &cfg).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("set");
    write_dataset(&sub, &samples).unwrap();
    let back = read_dataset(&sub).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (p, q) in a.boxes.iter().zip(&b.boxes) {
            for (u, v) in [(p.cx, q.cx), (p.cy, q.cy), (p.w, q.w), (p.h, q.h), (p.theta, q.theta)] {
                assert!((u - v).abs() < 1e-6);
            }
        }
        // Images are stored with 8 bits per channel.
        for (u, v) in a.image.data().iter().zip(b.image.data()) {
            assert!((u - v).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn malformed_box_file_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.boxes.txt");
    std::fs::write(&p, "# cx cy w h theta\n10 10 4 2 0\n1 2 three 4 0\n").unwrap();
    let err = textdet::toolkit::dataset::read_boxes(&p).unwrap_err();
    assert!(matches!(err, textdet::Error::Parse { line: 3, .. }), "{err:?}");
}

fn det(b: OrientedBox, s: f64) -> Detection {
    Detection::new(b, s).unwrap()
}

#[test]
fn identical_detections_score_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gts: Vec<Vec<OrientedBox>> = (0..5)
        .map(|_| {
            (0..rng.gen_range(1..5))
                .map(|i| OrientedBox::new(20.0 + 30.0 * i as f64, 40.0, 12.0, 6.0, rng.gen_range(-1.0..1.0)).unwrap())
                .collect()
        })
        .collect();
    let dets: Vec<Vec<Detection>> = gts.iter().map(|g| g.iter().map(|&b| det(b, 0.8)).collect()).collect();
    for mode in [IouMode::Rotated, IouMode::Enclosing] {
        let r = evaluate_detections(&dets, &gts, 0.5, mode).unwrap();
        assert_eq!((r.precision, r.recall, r.f_measure), (1.0, 1.0, 1.0));
    }
}

#[test]
fn greedy_matching_against_optimal_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut conflicting = 0;
    for _ in 0..300 {
        let gts: Vec<OrientedBox> = (0..rng.gen_range(1..5))
            .map(|_| common::random_box(&mut rng, 40.0, true))
            .collect();
        let dets: Vec<Detection> = (0..rng.gen_range(1..6))
            .map(|_| {
                let g = gts[rng.gen_range(0..gts.len())];
                let b = OrientedBox::new(
                    g.cx + rng.gen_range(-3.0..3.0),
                    g.cy + rng.gen_range(-3.0..3.0),
                    g.w * rng.gen_range(0.7..1.3),
                    g.h * rng.gen_range(0.7..1.3),
                    g.theta + rng.gen_range(-0.3..0.3),
                )
                .unwrap();
                det(b, rng.gen_range(0.0..1.0))
            })
            .collect();
        let ious: Vec<Vec<f64>> = dets
            .iter()
            .map(|d| gts.iter().map(|g| iou(&d.bbox, g, IouMode::Rotated).unwrap()).collect())
            .collect();
        let greedy = match_image(&dets, &gts, 0.5, IouMode::Rotated).unwrap().matches.len();
        let optimal = common::optimal_match_count(&ious, 0.5);
        assert!(
            greedy <= optimal && optimal - greedy <= 1,
            "greedy {greedy} optimal {optimal}"
        );
        let candidates_per_det = ious.iter().map(|r| r.iter().filter(|&&v| v >= 0.5).count());
        let candidates_per_gt = (0..gts.len()).map(|j| ious.iter().filter(|r| r[j] >= 0.5).count());
        if candidates_per_det.clone().all(|c| c <= 1) && candidates_per_gt.clone().all(|c| c <= 1) {
            assert_eq!(greedy, optimal);
        } else {
            conflicting += 1;
        }
    }
    assert!(conflicting > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_a_true_positive_never_hurts_recall(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<OrientedBox> = (0..4).map(|i| OrientedBox::axis_aligned(20.0 + 40.0 * i as f64, 30.0, 14.0, 6.0)).collect();
        let dets: Vec<Detection> = (0..rng.gen_range(0..4))
            .map(|_| det(common::random_box(&mut rng, 160.0, false), rng.gen_range(0.0..1.0)))
            .collect();
        let base = evaluate_detections(std::slice::from_ref(&dets), std::slice::from_ref(&gts), 0.5, IouMode::Rotated).unwrap();
        let missed = base.per_image[0].ground_truths
            - base.per_image[0].matches.len();
        prop_assume!(missed > 0);
        let taken: Vec<usize> = base.per_image[0].matches.iter().map(|m| m.1).collect();
        let free = (0..gts.len()).find(|j| !taken.contains(j)).unwrap();
        let mut more = dets.clone();
        more.push(det(gts[free], 1.0));
        let r = evaluate_detections(&[more], std::slice::from_ref(&gts), 0.5, IouMode::Rotated).unwrap();
        prop_assert!(r.recall >= base.recall);
    }

    #[test]
    fn adding_a_false_positive_never_raises_precision(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts = vec![OrientedBox::axis_aligned(30.0, 30.0, 14.0, 6.0)];
        let dets: Vec<Detection> = (0..rng.gen_range(1..4))
            .map(|_| det(common::random_box(&mut rng, 60.0, true), rng.gen_range(0.0..1.0)))
            .collect();
        let base = evaluate_detections(std::slice::from_ref(&dets), std::slice::from_ref(&gts), 0.5, IouMode::Rotated).unwrap();
        let mut more = dets;
        more.push(det(OrientedBox::axis_aligned(500.0, 500.0, 5.0, 5.0), rng.gen_range(0.0..1.0)));
        let r = evaluate_detections(&[more], &[gts], 0.5, IouMode::Rotated).unwrap();
        prop_assert!(r.precision <= base.precision);
        prop_assert_eq!(r.recall, base.recall);
    }

    #[test]
    fn raising_the_threshold_never_adds_matches(seed in 0u64..1000, lo in 0.1f64..0.5, hi in 0.5f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<OrientedBox> = (0..3).map(|_| common::random_box(&mut rng, 50.0, true)).collect();
        let dets: Vec<Detection> = (0..4).map(|_| det(common::random_box(&mut rng, 50.0, true), rng.gen_range(0.0..1.0))).collect();
        let a = evaluate_detections(std::slice::from_ref(&dets), std::slice::from_ref(&gts), lo, IouMode::Rotated).unwrap();
        let b = evaluate_detections(&[dets], &[gts], hi, IouMode::Rotated).unwrap();
        prop_assert!(b.matched() <= a.matched());
    }
}

#[test]
fn mismatched_image_counts_are_rejected() {
    assert!(evaluate_detections(&[vec![], vec![]], &[vec![]], 0.5, IouMode::Rotated).is_err());
    assert!(evaluate_detections(&[vec![]], &[vec![]], 1.5, IouMode::Rotated).is_err());
}
