//! Finite-difference checks for every differentiable kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textdet::tensor::gradcheck::{gradcheck, GradcheckOptions};
use textdet::tensor::{bilinear_upsample_weights, ConvSpec, PoolSpec, Shape, Tensor, IGNORE_LABEL};

const TOL64: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

fn opts() -> GradcheckOptions {
    GradcheckOptions::default()
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ConvSpec::same(3, 4, 3, 3);
    let x = rand_tensor(&mut rng, Shape::new(2, 3, 8, 8));
    let w = rand_tensor(&mut rng, spec.weight_shape());
    let b = rand_tensor(&mut rng, Shape::new(4, 1, 1, 1));
    let r = gradcheck(|g, v| g.conv2d(v[0], v[1], v[2], spec), &[x, w, b], opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "{r:?}");
    assert_eq!(r.skipped, 0);
}

#[test]
fn strided_dilated_conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = ConvSpec {
        kernel: (1, 5),
        stride: (2, 1),
        pad: (0, 4),
        dilation: (1, 2),
        in_channels: 2,
        out_channels: 3,
    };
    let x = rand_tensor(&mut rng, Shape::new(2, 2, 6, 6));
    let w = rand_tensor(&mut rng, spec.weight_shape());
    let b = rand_tensor(&mut rng, Shape::new(3, 1, 1, 1));
    let r = gradcheck(|g, v| g.conv2d(v[0], v[1], v[2], spec), &[x, w, b], opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "{r:?}");
}

#[test]
fn transposed_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for factor in [1, 2, 3] {
        let x = rand_tensor(&mut rng, Shape::new(2, 2, 3, 4));
        let w = rand_tensor(&mut rng, Shape::new(2, 3, 2 * factor, 2 * factor));
        let b = rand_tensor(&mut rng, Shape::new(3, 1, 1, 1));
        let r = gradcheck(
            |g, v| g.transposed_conv2d(v[0], v[1], Some(v[2]), factor),
            &[x, w, b],
            opts(),
        )
        .unwrap();
        assert!(r.max_rel_error < TOL64, "factor {factor}: {r:?}");
    }
    let w = bilinear_upsample_weights::<f64>(2, 2).unwrap();
    let x = rand_tensor(&mut rng, Shape::new(1, 2, 3, 3));
    let r = gradcheck(|g, v| g.transposed_conv2d(v[0], v[1], None, 2), &[x, w], opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "{r:?}");
}

#[test]
fn maxpool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, Shape::new(2, 2, 6, 6));
    for spec in [PoolSpec::new(2, 2, 0), PoolSpec::new(3, 1, 1)] {
        let r = gradcheck(|g, v| g.maxpool2d(v[0], spec), std::slice::from_ref(&x), opts()).unwrap();
        assert!(r.max_rel_error < TOL64, "{spec:?}: {r:?}");
    }
}

#[test]
fn maxpool_routes_to_argmax_by_perturbation() {
    // Perturb each element of [[1,2],[3,4]] and watch the pooled output.
    let base = [1.0, 2.0, 3.0, 4.0];
    let pooled = |d: &[f64]| {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), d.to_vec()).unwrap();
        textdet::tensor::maxpool2d(&t, PoolSpec::new(2, 2, 0))
            .unwrap()
            .output
            .data()[0]
    };
    let eps = 1e-6;
    let numeric: Vec<f64> = (0..4)
        .map(|i| {
            let mut p = base;
            p[i] += eps;
            let mut m = base;
            m[i] -= eps;
            (pooled(&p) - pooled(&m)) / (2.0 * eps)
        })
        .collect();
    let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), base.to_vec()).unwrap();
    let out = textdet::tensor::maxpool2d(&t, PoolSpec::new(2, 2, 0)).unwrap();
    let analytic = textdet::tensor::maxpool2d_backward(t.shape(), &out.argmax, &[1.0]).unwrap();
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!((a - n).abs() < 1e-9);
    }
    assert_eq!(analytic, vec![0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn concat_softmax_scale_resize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, Shape::new(2, 2, 3, 3));
    let b = rand_tensor(&mut rng, Shape::new(2, 3, 3, 3));
    let r = gradcheck(|g, v| g.concat(&[v[0], v[1]]), &[a.clone(), b], opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "concat {r:?}");

    let x = rand_tensor(&mut rng, Shape::new(2, 3, 4, 4));
    let r = gradcheck(|g, v| g.channel_softmax(v[0]), std::slice::from_ref(&x), opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "softmax {r:?}");

    let m = rand_tensor(&mut rng, Shape::new(2, 1, 4, 4));
    let r = gradcheck(|g, v| g.scale_by_map(v[0], v[1]), &[x.clone(), m], opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "scale {r:?}");

    let r = gradcheck(|g, v| g.resize_bilinear(v[0], 8, 8), std::slice::from_ref(&x), opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "upsample {r:?}");
    let r = gradcheck(|g, v| g.resize_bilinear(v[0], 2, 3), std::slice::from_ref(&x), opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "downsample {r:?}");

    let r = gradcheck(|g, v| g.channel_slice(v[0], 1, 2), &[x], opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "slice {r:?}");
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = rand_tensor(&mut rng, Shape::new(2, 6, 3, 3));
    let labels: Vec<i32> = (0..2 * 3 * 9).map(|i| [0, 1, IGNORE_LABEL][i % 3]).collect();
    let r = gradcheck(
        |g, v| g.softmax_cross_entropy(v[0], labels.clone(), 2, 7.0),
        &[logits],
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < TOL64, "ce {r:?}");

    let pred = Tensor::from_fn(Shape::new(1, 5, 2, 2), |i| (i as f64) * 0.37 - 3.0).unwrap();
    let target = vec![0.0; 20];
    let weight: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
    let r = gradcheck(
        |g, v| g.smooth_l1(v[0], target.clone(), weight.clone(), 3.0),
        &[pred],
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < TOL64, "smooth l1 {r:?}");

    let logits = rand_tensor(&mut rng, Shape::new(2, 2, 4, 4));
    let mask: Vec<f64> = (0..32).map(|i| ((i / 3) % 2) as f64).collect();
    let r = gradcheck(
        |g, v| {
            let p = g.channel_softmax(v[0])?;
            g.prob_cross_entropy(p, mask.clone())
        },
        &[logits],
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < TOL64, "attention loss {r:?}");
}

#[test]
fn smooth_l1_kink_is_skipped() {
    // One element sits exactly on the |x| = 1 knee.
    let pred = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 0.3, -2.0]).unwrap();
    let r = gradcheck(
        |g, v| g.smooth_l1(v[0], vec![0.0; 3], vec![1.0; 3], 1.0),
        &[pred],
        opts(),
    )
    .unwrap();
    assert_eq!(r.skipped, 1);
    assert_eq!(r.checked, 2);
    assert!(r.max_rel_error < TOL64);
}

#[test]
fn relu_gradients_away_from_hinge() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, Shape::new(1, 2, 5, 5));
    let r = gradcheck(|g, v| Ok(g.relu(v[0])), &[x], opts()).unwrap();
    assert!(r.max_rel_error < TOL64, "{r:?}");
}
