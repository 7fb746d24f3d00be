//! Finite-difference gradient suite over every graph op and the composed
//! attention, inception and aggregation paths, on randomised small tensors.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::TargetBundle;
use crate::attention::AttentionParams;
use crate::detector::{batch_targets, total_loss, BackboneLayer, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::inception::{AifParams, InceptionParams};
use crate::params::{ModelParams, ParamSpec, ParamVars};
use crate::tensor::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::tensor::{ConvSpec, Graph, PoolSpec, Scalar, Shape, Tensor, Var, IGNORE_LABEL};
use crate::toolkit::{generate_scene, GenConfig};

/// Pass threshold on the relative error in 64-bit arithmetic.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Pass threshold for 32-bit analytic gradients of the whole detector.
pub const MODEL_GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradcheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE && self.report.checked > 0
    }
}

type Build<'a> = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a>;

struct Case<'a> {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Build<'a>,
}

fn random(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).expect("non-empty shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.1..1.0)).expect("non-empty shape")
}

/// Random parameters for `specs`, returned in spec order with their names.
fn random_params(rng: &mut ChaCha8Rng, specs: &[ParamSpec]) -> (Vec<String>, Vec<Tensor<f64>>) {
    let p: ModelParams<f64> = ModelParams::initialize(specs, rng.gen()).expect("valid specs");
    specs
        .iter()
        .map(|s| {
            // Biases start at zero; jitter them so every bias gradient is exercised.
            let mut t = p.get(&s.name).expect("initialised").clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
            (s.name.clone(), t)
        })
        .unzip()
}

fn bind(names: &[String], vars: &[Var]) -> ParamVars {
    ParamVars::from_map(
        names
            .iter()
            .cloned()
            .zip(vars.iter().copied())
            .collect::<BTreeMap<_, _>>(),
    )
}

fn op_cases<'a>(rng: &mut ChaCha8Rng) -> Vec<Case<'a>> {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(5..=7);
    let w = rng.gen_range(5..=7);
    let x = Shape::new(n, c, h, w);
    let mut cases = Vec::new();

    let co = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let spec = ConvSpec {
        kernel: (k, rng.gen_range(1..=3)),
        stride: (rng.gen_range(1..=2), rng.gen_range(1..=2)),
        pad: (rng.gen_range(0..=1), rng.gen_range(0..=1)),
        dilation: (rng.gen_range(1..=2), 1),
        in_channels: c,
        out_channels: co,
    };
    cases.push(Case {
        name: "conv2d",
        inputs: vec![
            random(rng, x),
            random(rng, spec.weight_shape()),
            random(rng, Shape::new(co, 1, 1, 1)),
        ],
        build: Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], spec)),
    });
    let dspec = ConvSpec::dilated_same(c, co, 3, 3, 2);
    cases.push(Case {
        name: "conv2d_dilated",
        inputs: vec![
            random(rng, x),
            random(rng, dspec.weight_shape()),
            random(rng, Shape::new(co, 1, 1, 1)),
        ],
        build: Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], dspec)),
    });

    let factor = rng.gen_range(1..=3);
    cases.push(Case {
        name: "transposed_conv2d",
        inputs: vec![
            random(rng, Shape::new(n, c, 3, 3)),
            random(rng, Shape::new(c, co, 2 * factor, 2 * factor)),
            random(rng, Shape::new(co, 1, 1, 1)),
        ],
        build: Box::new(move |g, v| g.transposed_conv2d(v[0], v[1], Some(v[2]), factor)),
    });
    cases.push(Case {
        name: "relu",
        inputs: vec![random(rng, x)],
        build: Box::new(|g, v| Ok(g.relu(v[0]))),
    });
    let pool = if rng.gen_bool(0.5) {
        PoolSpec::new(2, 2, 0)
    } else {
        PoolSpec::new(3, 1, 1)
    };
    cases.push(Case {
        name: "maxpool2d",
        inputs: vec![random(rng, x)],
        build: Box::new(move |g, v| g.maxpool2d(v[0], pool)),
    });
    let c2 = rng.gen_range(1..=3);
    cases.push(Case {
        name: "concat",
        inputs: vec![random(rng, x), random(rng, Shape::new(n, c2, h, w))],
        build: Box::new(|g, v| g.concat(v)),
    });
    cases.push(Case {
        name: "channel_softmax",
        inputs: vec![random(rng, Shape::new(n, c + 1, h, w))],
        build: Box::new(|g, v| g.channel_softmax(v[0])),
    });
    let start = rng.gen_range(0..c);
    cases.push(Case {
        name: "channel_slice",
        inputs: vec![random(rng, x)],
        build: Box::new(move |g, v| g.channel_slice(v[0], start, c - start)),
    });
    cases.push(Case {
        name: "scale_by_map",
        inputs: vec![random(rng, x), random(rng, Shape::new(n, 1, h, w))],
        build: Box::new(|g, v| g.scale_by_map(v[0], v[1])),
    });
    let (rh, rw) = (rng.gen_range(2..=9), rng.gen_range(2..=9));
    cases.push(Case {
        name: "resize_bilinear",
        inputs: vec![random(rng, x)],
        build: Box::new(move |g, v| g.resize_bilinear(v[0], rh, rw)),
    });

    let groups = rng.gen_range(1..=3);
    let labels: Vec<i32> = (0..n * groups * h * w)
        .map(|_| match rng.gen_range(0..5) {
            0 => IGNORE_LABEL,
            l => l % 2,
        })
        .collect();
    cases.push(Case {
        name: "softmax_cross_entropy",
        inputs: vec![random(rng, Shape::new(n, 2 * groups, h, w))],
        build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], labels.clone(), 2, 3.0)),
    });
    let len = x.len();
    // Differences are kept away from the |d| = 1 knee and from zero.
    let target: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weight: Vec<f64> = (0..len)
        .map(|i| if i % 3 == 0 { 0.0 } else { rng.gen_range(0.5..1.5) })
        .collect();
    let pred = Tensor::from_fn(x, |i| {
        let d = [-2.5, -0.6, -0.2, 0.3, 0.7, 1.8][i % 6];
        target[i] + d
    })
    .expect("non-empty");
    cases.push(Case {
        name: "smooth_l1",
        inputs: vec![pred],
        build: Box::new(move |g, v| g.smooth_l1(v[0], target.clone(), weight.clone(), 2.0)),
    });
    let mask: Vec<f64> = (0..n * h * w)
        .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    cases.push(Case {
        name: "prob_cross_entropy",
        inputs: vec![positive(rng, Shape::new(n, 2, h, w))],
        build: Box::new(move |g, v| g.prob_cross_entropy(v[0], mask.clone())),
    });
    let (wa, wb) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let proj: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    cases.push(Case {
        name: "weighted_sum_dot",
        inputs: vec![random(rng, x)],
        build: Box::new(move |g, v| {
            let a = g.dot(v[0], proj.clone())?;
            let r = g.relu(v[0]);
            let b = g.dot(r, vec![1.0; len])?;
            g.weighted_sum(&[(a, wa), (b, wb)])
        }),
    });
    cases
}

fn composed_cases<'a>(rng: &mut ChaCha8Rng) -> Vec<Case<'a>> {
    let mut cases = Vec::new();
    let n = rng.gen_range(1..=2);

    // Attention: branch on a stride-4 source map, gating of a coarser
    // prediction map, and the pixel-mask loss.
    let (c, factor) = (rng.gen_range(2..=3), 4);
    let (sh, sw) = (rng.gen_range(2..=3), rng.gen_range(2..=3));
    let layout = AttentionParams {
        in_channels: c,
        conv_width: rng.gen_range(2..=3),
        factor,
    };
    let (names, mut inputs) = random_params(rng, &layout.param_specs("attention"));
    let fc = rng.gen_range(1..=3);
    inputs.push(random(rng, Shape::new(n, c, sh, sw)));
    inputs.push(random(rng, Shape::new(n, fc, sh / 2 + 1, sw)));
    let mask: Vec<f64> = (0..n * sh * sw * factor * factor)
        .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
        .collect();
    let k = names.len();
    let proj: Vec<f64> = (0..n * fc * (sh / 2 + 1) * sw)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    cases.push(Case {
        name: "attention",
        inputs,
        build: Box::new(move |g, v| {
            let p = bind(&names, &v[..k]);
            let alpha = layout.forward(g, v[k], &p, "attention")?;
            let pos = g.channel_slice(alpha, 1, 1)?;
            let fs = g.shape(v[k + 1]);
            let small = g.resize_bilinear(pos, fs.h, fs.w)?;
            let gated = g.scale_by_map(v[k + 1], small)?;
            let a = g.dot(gated, proj.clone())?;
            let b = g.prob_cross_entropy(alpha, mask.clone())?;
            g.weighted_sum(&[(a, 1.0), (b, 1.0)])
        }),
    });

    let c = rng.gen_range(1..=3);
    let layout = InceptionParams::new(c, rng.gen_range(1..=2), rng.gen_range(1..=2));
    let (names, mut inputs) = random_params(rng, &layout.param_specs("inception"));
    let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
    inputs.push(random(rng, Shape::new(n, c, h, w)));
    let k = names.len();
    cases.push(Case {
        name: "inception",
        inputs,
        build: Box::new(move |g, v| layout.forward(g, v[k], &bind(&names, &v[..k]), "inception")),
    });

    let (h, w) = (2 * rng.gen_range(1..=2), 2 * rng.gen_range(1..=2));
    let layout = AifParams {
        lower_channels: Some(rng.gen_range(1..=2)),
        current_channels: rng.gen_range(1..=2),
        higher_channels: Some(rng.gen_range(1..=2)),
        width: rng.gen_range(1..=3),
    };
    let (names, mut inputs) = random_params(rng, &layout.param_specs("aif"));
    for (ch, s) in [(layout.lower_channels, 2), (Some(layout.current_channels), 1)] {
        inputs.push(random(rng, Shape::new(n, ch.unwrap_or(1), s * h, s * w)));
    }
    inputs.push(random(
        rng,
        Shape::new(n, layout.higher_channels.unwrap_or(1), h / 2, w / 2),
    ));
    let k = names.len();
    cases.push(Case {
        name: "aif",
        inputs,
        build: Box::new(move |g, v| {
            layout.forward(g, Some(v[k]), v[k + 1], Some(v[k + 2]), &bind(&names, &v[..k]), "aif")
        }),
    });
    cases
}

/// Runs every case once with inputs drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = op_cases(&mut rng);
    cases.extend(composed_cases(&mut rng));
    cases
        .into_iter()
        .map(|case| {
            let opts = GradcheckOptions {
                max_per_input: Some(48),
                seed: seed ^ 0x9e37_79b9,
                ..GradcheckOptions::default()
            };
            let report = gradcheck(&case.build, &case.inputs, opts)?;
            Ok(SuiteResult {
                name: case.name.to_string(),
                report,
            })
        })
        .collect()
}

/// The desk layout on a 32-pixel input with narrow layers.
pub fn tiny_config() -> DetectorConfig {
    let mut cfg = DetectorConfig::desk();
    cfg.input_size = 32;
    for layer in &mut cfg.backbone {
        if let BackboneLayer::Conv { out_channels, .. } = layer {
            *out_channels = (*out_channels / 8).max(2);
        }
    }
    cfg.inception.width = 8;
    for a in &mut cfg.aif {
        a.width = 6;
    }
    cfg.attention.conv_width = 3;
    cfg
}

/// A 32-pixel scene with at least one word.
fn tiny_scene(seed: u64) -> Result<crate::toolkit::SceneSample> {
    let gen = GenConfig {
        size: 32,
        min_words: 1,
        max_words: 2,
        min_height: 5.0,
        max_height: 9.0,
        min_aspect: 1.5,
        max_aspect: 3.0,
        ..GenConfig::default()
    };
    (0..64)
        .map(|k| generate_scene(seed.wrapping_mul(64).wrapping_add(k), &gen))
        .find(|s| s.as_ref().map_or(true, |s| !s.boxes.is_empty()))
        .unwrap_or_else(|| Err(Error::invalid("tiny_scene", "no scene with words")))
}

fn model_loss<T: Scalar>(
    g: &mut Graph<T>,
    det: &Detector,
    input: &Tensor<T>,
    p: &ParamVars,
    targets: &[TargetBundle],
    mask: &[T],
) -> Result<Var> {
    let x = g.leaf(input.clone(), false);
    let fv = det.forward_graph(g, x, p)?;
    let (lv, _) = total_loss(g, det.anchors(), &fv, targets, Some(mask), &det.config().loss)?;
    Ok(lv.total)
}

/// Full detector loss on [`tiny_config`]: 32-bit analytic gradients against
/// 64-bit central differences at the same parameters, on `per_tensor`
/// random elements of every parameter tensor. Targets are matched and mined
/// once and then held fixed.
pub fn model_gradient_check(seed: u64, per_tensor: usize) -> Result<GradcheckReport> {
    let det = Detector::new(tiny_config())?;
    let p32: ModelParams<f32> = det.init_params(seed)?;
    let p64: ModelParams<f64> = p32.cast();
    let scene = tiny_scene(seed)?;
    let input32 = det.preprocess(&[&scene.image])?;
    let input64: Tensor<f64> = input32.cast();
    let mask32 = scene.mask.data().to_vec();
    let mask64: Vec<f64> = mask32.iter().map(|&v| v as f64).collect();

    let base_out = det.forward(&[&scene.image.cast::<f64>()], &p64)?;
    let cls: Vec<&Tensor<f64>> = base_out.layers.iter().map(|l| &l.cls_logits).collect();
    let targets = batch_targets(
        det.anchors(),
        &cls,
        std::slice::from_ref(&scene.boxes),
        &det.config().matching,
    )?;

    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &p32, |_| true);
    let loss = model_loss(&mut g, &det, &input32, &pv, &targets, &mask32)?;
    g.backward(loss)?;

    let eval64 = |params: &ModelParams<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, params, |_| false);
        let l = model_loss(&mut g, &det, &input64, &pv, &targets, &mask64)?;
        Ok((g.scalar(l), g.branch_signature()))
    };
    let (_, base_sig) = eval64(&p64)?;
    let opts = GradcheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x006d_6f64_656c);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = p64.clone();
    for (name, var) in pv.iter() {
        let analytic = g.grad(*var).map(<[f32]>::to_vec).unwrap_or_default();
        let len = p64.get(name)?.data().len();
        for _ in 0..per_tensor.min(len) {
            let i = rng.gen_range(0..len);
            let x0 = p64.get(name)?.data()[i];
            let mut at = |v: f64| -> Result<(f64, u64)> {
                probe.get_mut(name)?.data_mut()[i] = v;
                eval64(&probe)
            };
            let (lp, sp) = at(x0 + opts.eps)?;
            let (lm, sm) = at(x0 - opts.eps)?;
            probe.get_mut(name)?.data_mut()[i] = x0;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let a = analytic.get(i).copied().unwrap_or(0.0) as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients() {
        let r = model_gradient_check(1, 2).unwrap();
        assert!(r.max_rel_error < MODEL_GRADCHECK_TOLERANCE && r.checked > 20, "{r:?}");
    }

    #[test]
    fn suite_passes_on_one_seed() {
        for r in gradient_suite(11).unwrap() {
            assert!(r.passed(), "{} {:?}", r.name, r.report);
        }
    }
}
