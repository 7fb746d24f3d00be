mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textdet::anchors::{build_targets, generate_default_boxes, match_anchors, LayerAnchorSpec, MiningConfig};
use textdet::detector::DetectorConfig;
use textdet::tensor::IGNORE_LABEL;

#[test]
fn desk_anchor_count() {
    let cfg = DetectorConfig::desk();
    let set = generate_default_boxes(&cfg.anchor_specs(), cfg.input_size).unwrap();
    assert_eq!(set.len(), (256 + 64 + 16) * 45);
    for l in &set.layers {
        assert_eq!(l.per_location(), 45);
        assert_eq!(l.grid_h * l.stride, 128);
    }
}

#[test]
fn anchors_are_centred_on_cells_in_channel_order() {
    let spec = LayerAnchorSpec::new("L", 16, vec![10.0, 20.0]);
    let set = generate_default_boxes(std::slice::from_ref(&spec), 64).unwrap();
    let shapes = spec.shapes();
    for (i, b) in set.boxes.iter().enumerate() {
        let cell = i / shapes.len();
        let (y, x) = (cell / 4, cell % 4);
        assert_eq!((b.cx, b.cy), (x as f64 * 16.0 + 8.0, y as f64 * 16.0 + 8.0));
        let s = &shapes[i % shapes.len()];
        assert_eq!((b.w, b.h), (s.w, s.h));
    }
}

#[test]
fn rejects_bad_specs() {
    assert!(generate_default_boxes(&[LayerAnchorSpec::new("L", 3, vec![4.0])], 64).is_err());
    assert!(generate_default_boxes(&[LayerAnchorSpec::new("L", 8, vec![4.0, 4.0])], 64).is_err());
    assert!(generate_default_boxes(&[LayerAnchorSpec::new("L", 8, vec![])], 64).is_err());
}

#[test]
fn mining_keeps_the_hardest_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = LayerAnchorSpec::new("L", 8, vec![8.0, 16.0]);
    let set = generate_default_boxes(&[spec], 32).unwrap();
    let gts = vec![common::random_box(&mut rng, 32.0, false)];
    let assign = match_anchors(&set, &gts, 0.5, false).unwrap();
    let losses: Vec<f64> = (0..set.len()).map(|_| rng.gen()).collect();
    let t = build_targets(&assign, &set, &gts, &losses, MiningConfig::default()).unwrap();
    assert_eq!(t.negative_count, 3 * t.positive_count);
    let kept_min = (0..set.len())
        .filter(|&a| t.labels[a] == 0)
        .map(|a| losses[a])
        .fold(f64::INFINITY, f64::min);
    let dropped_max = (0..set.len())
        .filter(|&a| t.labels[a] == IGNORE_LABEL)
        .map(|a| losses[a])
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(kept_min >= dropped_max);
    for a in 0..set.len() {
        assert_eq!(t.offsets[a].is_some(), t.labels[a] == 1);
    }
}

#[test]
fn empty_image_keeps_the_negative_floor() {
    let set = generate_default_boxes(&[LayerAnchorSpec::new("L", 8, vec![8.0])], 64).unwrap();
    let assign = match_anchors(&set, &[], 0.5, false).unwrap();
    let losses = vec![0.1; set.len()];
    let t = build_targets(&assign, &set, &[], &losses, MiningConfig::default()).unwrap();
    assert_eq!((t.positive_count, t.negative_count), (0, 32));
}
