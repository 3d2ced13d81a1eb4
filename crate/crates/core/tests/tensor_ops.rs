mod common;

use common::{brute_conv, random, rng};
use lkdn_core::tensor::{self, conv2d};
use lkdn_core::{ConvSpec, Shape, Tensor};
use proptest::prelude::*;

/// The six convolution geometries the network is built from.
fn network_geometries(c: usize) -> [(&'static str, ConvSpec); 6] {
    [
        ("pointwise", ConvSpec::pointwise(c, c + 1)),
        ("dense 3x3", ConvSpec::dense(c, 2 * c, 3)),
        ("depthwise 3x3", ConvSpec::depthwise(c, 3)),
        ("depthwise 1x1", ConvSpec::depthwise(c, 1)),
        ("depthwise 5x5", ConvSpec::depthwise(c, 5)),
        ("dilated depthwise 5x5", ConvSpec::depthwise(c, 5).with_dilation(3)),
    ]
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn conv_matches_direct_summation() {
    let mut r = rng(6);
    for case in 0..20 {
        for (name, spec) in network_geometries(1 + case % 5) {
            for bias in [false, true] {
                let spec = spec.with_bias(bias);
                let x = random(Shape::new(2, spec.in_channels, 5 + case % 9, 4 + case % 11), &mut r);
                let w = random(spec.weight_shape(), &mut r);
                let b = bias.then(|| random(spec.bias_shape(), &mut r));
                let fast = conv2d(&x, &w, b.as_ref(), &spec).unwrap();
                let slow = brute_conv(&x, &w, b.as_ref(), &spec);
                assert_eq!(fast.shape(), slow.shape(), "{name}");
                assert!(rel_err(&fast, &slow) < 1e-12, "{name}");
            }
        }
    }
}

#[test]
fn dilated_padding_preserves_size() {
    let s = ConvSpec::depthwise(4, 5).with_dilation(3);
    assert_eq!(s.padding, 6);
    assert_eq!(s.output_size(17, 9).unwrap(), (17, 9));
}

#[test]
fn conv_grads_match_direct_adjoint() {
    // <conv(x), g> = <x, conv^T(g)> = <w, dconv/dw(g)>
    let mut r = rng(1);
    for (name, spec) in network_geometries(3) {
        let x = random(Shape::new(2, spec.in_channels, 9, 7), &mut r);
        let w = random(spec.weight_shape(), &mut r);
        let y = brute_conv(&x, &w, None, &spec);
        let g = random(y.shape(), &mut r);
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &g);
        let gx = tensor::conv2d_grad_input(&g, &w, &spec, x.shape());
        let gw = tensor::conv2d_grad_weight(&g, &x, &spec);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-9 * lhs.abs().max(1.0), "{name}");
        assert!((lhs - dot(&w, &gw)).abs() < 1e-9 * lhs.abs().max(1.0), "{name}");
    }
}

#[test]
fn shape_errors_are_structured() {
    let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
    let spec = ConvSpec::dense(4, 4, 3);
    let w = Tensor::zeros(spec.weight_shape());
    assert!(matches!(conv2d(&x, &w, None, &spec), Err(lkdn_core::Error::ShapeMismatch { .. })));
    assert!(tensor::pixel_shuffle(&x, 2).is_err());
    let a = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 5));
    assert!(tensor::add(&x, &a).is_err());
}

fn small_tensor(shape: Shape) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-4.0f64..4.0, shape.numel()).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(
        (x, y, w) in (1usize..4, 3usize..8).prop_flat_map(|(c, hw)| {
            let s = ConvSpec::dense(c, 2, 3);
            (small_tensor(Shape::new(1, c, hw, hw)), small_tensor(Shape::new(1, c, hw, hw)), small_tensor(s.weight_shape()))
        }),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let spec = ConvSpec::dense(x.shape().c, 2, 3);
        let mut mix = x.map(|v| a * v);
        mix.add_scaled_(&y, b).unwrap();
        let lhs = conv2d(&mix, &w, None, &spec).unwrap();
        let mut rhs = conv2d(&x, &w, None, &spec).unwrap().map(|v| a * v);
        rhs.add_scaled_(&conv2d(&y, &w, None, &spec).unwrap(), b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
    }

    #[test]
    fn pixel_shuffle_round_trips(r in 1usize..4, c in 1usize..3, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
        let x = random(Shape::new(2, c * r * r, h, w), &mut rng(seed));
        let up = tensor::pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(up.shape(), Shape::new(2, c, h * r, w * r));
        prop_assert_eq!(tensor::pixel_unshuffle(&up, r).unwrap(), x);
    }

    #[test]
    fn concat_split_round_trips(widths in proptest::collection::vec(1usize..4, 1..5), seed in 0u64..1000) {
        let mut r = rng(seed);
        let parts: Vec<Tensor<f64>> = widths.iter().map(|&c| random(Shape::new(2, c, 3, 2), &mut r)).collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let cat = tensor::concat_channels(&refs).unwrap();
        prop_assert_eq!(tensor::split_channels(&cat, &widths).unwrap(), parts);
    }

    #[test]
    fn pixel_norm_output_is_standardized(seed in 0u64..1000, c in 2usize..9) {
        let x = random(Shape::new(1, c, 3, 3), &mut rng(seed)).map(|v| 10.0 * v + 3.0);
        let gamma = Tensor::full(Shape::new(c, 1, 1, 1), 1.0);
        let beta = Tensor::zeros(Shape::new(c, 1, 1, 1));
        let (y, _) = tensor::pixel_norm(&x, &gamma, &beta, tensor::PIXEL_NORM_EPS).unwrap();
        for py in 0..3 {
            for px in 0..3 {
                let moments = |ch: &dyn Fn(usize) -> f64| {
                    let mean = (0..c).map(ch).sum::<f64>() / c as f64;
                    let var = (0..c).map(|i| (ch(i) - mean) * (ch(i) - mean)).sum::<f64>() / c as f64;
                    (mean, var)
                };
                let (_, raw_var) = moments(&|ch| x.at(0, ch, py, px));
                let (mean, var) = moments(&|ch| y.at(0, ch, py, px));
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - raw_var / (raw_var + tensor::PIXEL_NORM_EPS)).abs() < 1e-9);
            }
        }
    }
}
