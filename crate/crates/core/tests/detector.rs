use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textdet::detector::{
    augment_sample_with_record, batch_targets, crop_and_resize, detect, loss_and_grads, total_loss, train_step,
    AugmentConfig, Detector, DetectorConfig, LossWeights, Patch, SgdState, Trainer,
};
use textdet::geometry::{encode_offsets, OrientedBox};
use textdet::params::ModelParams;
use textdet::tensor::{Graph, Shape, Tensor};
use textdet::toolkit::{generate_scene, GenConfig, SceneSample};
use textdet::verify::tiny_config;

fn scenes(n: u64, size: usize) -> Vec<SceneSample> {
    let gen = GenConfig {
        size,
        ..GenConfig::default()
    };
    (0..n).map(|i| generate_scene(100 + i, &gen).unwrap()).collect()
}

fn tiny_scenes(n: u64) -> Vec<SceneSample> {
    let gen = GenConfig {
        size: 32,
        min_height: 5.0,
        max_height: 9.0,
        min_aspect: 1.5,
        max_aspect: 3.0,
        max_words: 2,
        ..GenConfig::default()
    };
    (0..n).map(|i| generate_scene(7 + i, &gen).unwrap()).collect()
}

#[test]
fn desk_output_shapes_and_purity() {
    let det = Detector::new(DetectorConfig::desk()).unwrap();
    assert_eq!(det.anchors().len(), 15120);
    let params: ModelParams<f32> = det.init_params(1).unwrap();
    let data = scenes(1, 128);
    let a = det.forward(&[&data[0].image], &params).unwrap();
    let b = det.forward(&[&data[0].image], &params).unwrap();
    let grids: Vec<(usize, usize)> = a
        .layers
        .iter()
        .map(|l| (l.cls_logits.shape().h, l.cls_logits.shape().w))
        .collect();
    assert_eq!(grids, vec![(16, 16), (8, 8), (4, 4)]);
    for l in &a.layers {
        assert_eq!(l.cls_logits.shape().c, 2 * 45);
        assert_eq!(l.loc_offsets.shape().c, 5 * 45);
    }
    for (x, y) in a.layers.iter().zip(&b.layers) {
        assert_eq!(x.cls_logits.data(), y.cls_logits.data());
        assert_eq!(x.loc_offsets.data(), y.loc_offsets.data());
    }
    assert_eq!(a.attention.unwrap().alpha_pos.shape(), Shape::new(1, 1, 128, 128));
}

#[test]
fn wrong_image_size_and_missing_tensor_are_errors() {
    let det = Detector::new(tiny_config()).unwrap();
    let params: ModelParams<f32> = det.init_params(0).unwrap();
    let big = Tensor::<f32>::zeros(Shape::new(1, 3, 64, 64)).unwrap();
    assert!(det.forward(&[&big], &params).is_err());
    let mut partial = ModelParams::new();
    for (name, t) in params.iter().filter(|(n, _)| *n != "head.Inc-2.cls.weight") {
        partial.insert(name.clone(), t.clone()).unwrap();
    }
    let img = Tensor::<f32>::zeros(Shape::new(1, 3, 32, 32)).unwrap();
    let err = det.forward(&[&img], &partial).unwrap_err();
    assert!(err.to_string().contains("head.Inc-2.cls.weight"), "{err}");
}

#[test]
fn perfect_outputs_have_near_zero_detection_loss() {
    let det = Detector::new(tiny_config()).unwrap();
    let anchors = det.anchors();
    let gts = vec![vec![OrientedBox::axis_aligned(15.0, 12.0, 11.0, 5.0)]];
    // Matching needs current logits only for mining; flat zeros tie every negative.
    let zero_cls: Vec<Tensor<f64>> = anchors
        .layers
        .iter()
        .map(|l| Tensor::zeros(Shape::new(1, 2 * l.per_location(), l.grid_h, l.grid_w)).unwrap())
        .collect();
    let refs: Vec<&Tensor<f64>> = zero_cls.iter().collect();
    let targets = batch_targets(anchors, &refs, &gts, &det.config().matching).unwrap();
    assert!(targets[0].positive_count > 0);

    let mut g = Graph::<f64>::new();
    let mut cls = Vec::new();
    let mut loc = Vec::new();
    for l in &anchors.layers {
        let a_n = l.per_location();
        let mut c = Tensor::zeros(Shape::new(1, 2 * a_n, l.grid_h, l.grid_w)).unwrap();
        let mut o = Tensor::zeros(Shape::new(1, 5 * a_n, l.grid_h, l.grid_w)).unwrap();
        for y in 0..l.grid_h {
            for x in 0..l.grid_w {
                for a in 0..a_n {
                    let idx = l.offset + (y * l.grid_w + x) * a_n + a;
                    let text = targets[0].labels[idx] == 1;
                    c.set(0, 2 * a + usize::from(text), y, x, 20.0);
                    if let Some(off) = targets[0].offsets[idx] {
                        let want = encode_offsets(&gts[0][0], &anchors.boxes[idx]).unwrap();
                        assert_eq!(off, want);
                        for (j, v) in off.to_array().into_iter().enumerate() {
                            o.set(0, 5 * a + j, y, x, v);
                        }
                    }
                }
            }
        }
        cls.push(g.leaf(c, true));
        loc.push(g.leaf(o, true));
    }
    let fv = textdet::detector::ForwardVars {
        cls,
        loc,
        alpha: None,
        gates: vec![None; anchors.layers.len()],
    };
    let (_, parts) = total_loss(&mut g, anchors, &fv, &targets, None, &LossWeights::default()).unwrap();
    assert!(parts.cls + parts.loc < 1e-4, "{parts:?}");
}

#[test]
fn total_is_the_weighted_sum_of_components() {
    let mut cfg = tiny_config();
    cfg.loss = LossWeights {
        cls: 0.7,
        loc: 1.9,
        attention: 0.4,
    };
    let det = Detector::new(cfg).unwrap();
    let params: ModelParams<f32> = det.init_params(2).unwrap();
    let data = tiny_scenes(2);
    let imgs: Vec<_> = data.iter().map(|s| &s.image).collect();
    let masks: Vec<_> = data.iter().map(|s| &s.mask).collect();
    let gts: Vec<_> = data.iter().map(|s| s.boxes.clone()).collect();
    let r = loss_and_grads(&det, &params, &imgs, &gts, &masks).unwrap().loss;
    let want = 0.7 * r.cls + 1.9 * r.loc + 0.4 * r.attention;
    assert!((r.total - want).abs() < 1e-9 * r.total.abs().max(1.0) + 1e-6, "{r:?}");
}

#[test]
fn plain_sgd_without_momentum() {
    let det = Detector::new(tiny_config()).unwrap();
    let mut cfg = det.config().optimizer;
    cfg.momentum = 0.0;
    cfg.weight_decay = 0.0;
    cfg.lr = 0.01;
    let mut params: ModelParams<f32> = det.init_params(0).unwrap();
    let before = params.clone();
    let grads: BTreeMap<String, Vec<f32>> = params
        .iter()
        .map(|(n, t)| (n.clone(), (0..t.data().len()).map(|i| (i % 7) as f32 - 3.0).collect()))
        .collect();
    SgdState::new().apply(&cfg, &mut params, &grads).unwrap();
    for (name, g) in &grads {
        let (a, b) = (before.get(name).unwrap().data(), params.get(name).unwrap().data());
        for i in 0..g.len() {
            assert_eq!(b[i], a[i] + (0.0 * 0.0 - 0.01f32 * g[i]));
        }
    }
}

#[test]
fn learning_rate_decays_at_the_configured_step() {
    let cfg = DetectorConfig::full_scale().optimizer;
    assert_eq!(SgdState::learning_rate(&cfg, 14_999), 1e-3);
    assert!((SgdState::learning_rate(&cfg, 15_000) - 1e-4).abs() < 1e-18);
}

#[test]
fn one_small_step_decreases_the_loss() {
    let mut cfg = tiny_config();
    cfg.augment.enabled = false;
    let det = Detector::new(cfg).unwrap();
    let sample = tiny_scenes(1);
    for lr in [1e-3, 1e-4] {
        let mut c = det.config().optimizer;
        c.lr = lr;
        let mut params: ModelParams<f32> = det.init_params(5).unwrap();
        let args = (
            vec![&sample[0].image],
            vec![sample[0].boxes.clone()],
            vec![&sample[0].mask],
        );
        let first = loss_and_grads(&det, &params, &args.0, &args.1, &args.2).unwrap();
        SgdState::new().apply(&c, &mut params, &first.grads).unwrap();
        // Targets are re-mined after the step; compare on the same selection
        // by evaluating with the new parameters.
        let second = loss_and_grads(&det, &params, &args.0, &args.1, &args.2).unwrap();
        assert!(
            second.loss.total < first.loss.total,
            "lr {lr}: {} -> {}",
            first.loss.total,
            second.loss.total
        );
    }
}

#[test]
fn untrained_zero_model_detects_nothing() {
    let det = Detector::new(tiny_config()).unwrap();
    let params: ModelParams<f32> = det.zero_params().unwrap();
    let img = tiny_scenes(1).remove(0).image;
    let out = det.forward(&[&img], &params).unwrap();
    assert!(out.layers.iter().all(|l| l.cls_logits.data().iter().all(|&v| v == 0.0)));
    assert!(detect(&det, &[&img], &params, &det.config().inference).unwrap()[0].is_empty());
}

#[test]
fn training_is_deterministic() {
    let mut cfg = tiny_config();
    cfg.optimizer.batch_size = 2;
    let data = tiny_scenes(3);
    let run = || {
        let mut t = Trainer::new(Detector::new(cfg.clone()).unwrap(), 11).unwrap();
        (0..4)
            .map(|_| t.train_on(&data).unwrap().loss.total)
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-5 * x.abs());
    }
}

#[test]
fn frozen_layers_do_not_move() {
    let mut cfg = tiny_config();
    cfg.optimizer.freeze_layers = 2;
    cfg.augment.enabled = true;
    let det = Detector::new(cfg).unwrap();
    let data = tiny_scenes(2);
    let mut params: ModelParams<f32> = det.init_params(0).unwrap();
    let before = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    train_step(&det, &data, &mut params, &mut SgdState::new(), &mut rng).unwrap();
    assert_eq!(
        params.get("backbone.conv1.weight").unwrap(),
        before.get("backbone.conv1.weight").unwrap()
    );
    assert_eq!(
        params.get("backbone.conv2.bias").unwrap(),
        before.get("backbone.conv2.bias").unwrap()
    );
    assert_ne!(
        params.get("backbone.conv3.weight").unwrap(),
        before.get("backbone.conv3.weight").unwrap()
    );
}

#[test]
fn cropped_boxes_stay_on_text_pixels() {
    let data = scenes(20, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = AugmentConfig {
        mirror_prob: 0.5,
        distort_prob: 0.0,
        ..AugmentConfig::default()
    };
    let mut checked = 0;
    for s in &data {
        for _ in 0..5 {
            let (out, rec) = augment_sample_with_record(s, &cfg, 128, &mut rng).unwrap();
            for b in &out.boxes {
                // Interior pixel centres, shrunk by one pixel per side to
                // allow for nearest-neighbour resampling of the mask.
                let (x0, y0, x1, y1) = b.extent();
                let (sx, sy) = (128.0 / rec.patch.w as f64, 128.0 / rec.patch.h as f64);
                for y in (y0 + sy).ceil() as usize..(y1 - sy).floor().max(0.0) as usize {
                    for x in (x0 + sx).ceil() as usize..(x1 - sx).floor().max(0.0) as usize {
                        if x < 128 && y < 128 {
                            assert_eq!(out.mask.at(0, 0, y, x), 1.0);
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn whole_image_crop_is_the_identity() {
    let s = scenes(1, 128).remove(0);
    let out = crop_and_resize(
        &s,
        Patch {
            x: 0,
            y: 0,
            w: 128,
            h: 128,
        },
        128,
    )
    .unwrap();
    assert_eq!(out, s);
}
