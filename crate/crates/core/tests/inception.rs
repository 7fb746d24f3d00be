use proptest::prelude::*;
use textdet::inception::{aggregate_aif, inception_block, AifParams, InceptionParams};
use textdet::params::ModelParams;
use textdet::tensor::{Shape, Tensor};

fn positive_params(layout: &InceptionParams) -> ModelParams<f64> {
    let mut p: ModelParams<f64> = ModelParams::initialize(&layout.param_specs("inc"), 3).unwrap();
    for (name, t) in p.iter_mut() {
        let v = if name.ends_with(".weight") { 1.0 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|x| *x = v);
    }
    p
}

/// Rows and columns of the non-zero support of channel `c`.
fn support(t: &Tensor<f64>, c: usize) -> (usize, usize, usize, usize) {
    let s = t.shape();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..s.h {
        for x in 0..s.w {
            if t.at(0, c, y, x) != 0.0 {
                (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
            }
        }
    }
    (y0, y1, x0, x1)
}

#[test]
fn impulse_support_of_each_branch() {
    let layout = InceptionParams::new(1, 1, 2);
    let p = positive_params(&layout);
    let mut x = Tensor::zeros(Shape::new(1, 1, 15, 15)).unwrap();
    x.set(0, 0, 7, 7, 1.0);
    let y = inception_block(&x, &p, "inc", &layout).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 4, 15, 15));
    // Branch order: 1x1, dilated 3x3, pool + 1x1, dilated 1x5 then 5x1.
    assert_eq!(support(&y, 0), (7, 7, 7, 7));
    assert_eq!(support(&y, 1), (5, 9, 5, 9));
    assert_eq!(support(&y, 2), (6, 8, 6, 8));
    let (y0, y1, x0, x1) = support(&y, 3);
    assert_eq!((y1 - y0 + 1, x1 - x0 + 1), (9, 9));
    assert_eq!((y0, x0), (3, 3));
}

#[test]
fn zeroing_a_branch_zeroes_exactly_its_slice() {
    let layout = InceptionParams::new(3, 2, 2);
    let base: ModelParams<f64> = ModelParams::initialize(&layout.param_specs("inc"), 8).unwrap();
    let x = Tensor::from_fn(Shape::new(1, 3, 9, 10), |i| ((i * 31 % 17) as f64) / 17.0 + 0.1).unwrap();
    let full = inception_block(&x, &base, "inc", &layout).unwrap();
    for (b, branch) in ["b1x1", "b3x3", "pool", "b5x5.col"].iter().enumerate() {
        let mut p = base.clone();
        p.get_mut(&format!("inc.{branch}.weight")).unwrap().data_mut().fill(0.0);
        p.get_mut(&format!("inc.{branch}.bias")).unwrap().data_mut().fill(0.0);
        let y = inception_block(&x, &p, "inc", &layout).unwrap();
        for c in 0..8 {
            if c / 2 == b {
                assert!(y.channel(0, c).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(y.channel(0, c), full.channel(0, c));
            }
        }
    }
}

#[test]
fn constant_inputs_give_a_constant_aggregate() {
    let layout = AifParams {
        lower_channels: Some(2),
        current_channels: 2,
        higher_channels: Some(2),
        width: 3,
    };
    let p: ModelParams<f64> = ModelParams::initialize(&layout.param_specs("aif"), 1).unwrap();
    let c = |h, w| Tensor::filled(Shape::new(1, 2, h, w), 0.7).unwrap();
    let y = aggregate_aif(Some(&c(8, 12)), &c(4, 6), Some(&c(2, 3)), &p, "aif", &layout).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 3, 4, 6));
    for ch in 0..3 {
        let v = y.channel(0, ch);
        assert!(v.iter().all(|&x| (x - v[0]).abs() < 1e-14));
    }
}

#[test]
fn boundary_layers_use_the_available_neighbours() {
    let layout = AifParams {
        lower_channels: None,
        current_channels: 2,
        higher_channels: Some(1),
        width: 2,
    };
    let p: ModelParams<f64> = ModelParams::initialize(&layout.param_specs("aif"), 1).unwrap();
    assert_eq!(p.get("aif.proj.weight").unwrap().shape(), Shape::new(2, 3, 1, 1));
    let cur = Tensor::filled(Shape::new(1, 2, 4, 4), 1.0).unwrap();
    let hi = Tensor::filled(Shape::new(1, 1, 2, 2), 1.0).unwrap();
    assert!(aggregate_aif(None, &cur, Some(&hi), &p, "aif", &layout).is_ok());
    assert!(aggregate_aif(Some(&cur), &cur, Some(&hi), &p, "aif", &layout).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn spatial_size_is_preserved(h in 8usize..20, w in 8usize..20, d in 1usize..4) {
        let layout = InceptionParams::new(2, 2, d);
        let p: ModelParams<f32> = ModelParams::initialize(&layout.param_specs("inc"), 0).unwrap();
        let x = Tensor::filled(Shape::new(1, 2, h, w), 0.5).unwrap();
        prop_assert_eq!(inception_block(&x, &p, "inc", &layout).unwrap().shape(), Shape::new(1, 8, h, w));
    }
}
