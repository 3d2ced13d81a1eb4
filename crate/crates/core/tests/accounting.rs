use lkdn_core::autodiff::Graph;
use lkdn_core::model::{count_multadds, count_params, layer_specs, lka_receptive_field, receptive_field, LayerKind};
use lkdn_core::{LkdnConfig, Model, Shape, Tape, Tensor};

fn within(value: f64, target: f64, frac: f64) -> bool {
    (value - target).abs() <= frac * target
}

#[test]
fn published_parameter_counts() {
    for (config, target) in [
        (LkdnConfig::lkdn(4), 322e3),
        (LkdnConfig::lkdn(3), 311e3),
        (LkdnConfig::lkdn(2), 304e3),
        (LkdnConfig::lkdn_s(4).fused_config(), 129e3),
    ] {
        let n = count_params(&config).unwrap() as f64;
        assert!(within(n, target, 0.05), "{config:?}: {n} vs {target}");
    }
}

#[test]
fn scale_only_changes_the_reconstruction_conv() {
    let c = 56;
    let x4 = count_params(&LkdnConfig::lkdn(4)).unwrap();
    let x2 = count_params(&LkdnConfig::lkdn(2)).unwrap();
    assert_eq!(x4 - x2, 3 * c * 9 * (4 * 4 - 2 * 2));
}

#[test]
fn published_multadds_at_720p() {
    for (config, target) in [
        (LkdnConfig::lkdn(4), 18.3e9),
        (LkdnConfig::lkdn(3), 31.4e9),
        (LkdnConfig::lkdn(2), 69.1e9),
        (LkdnConfig::lkdn_s(4).fused_config(), 7.3e9),
    ] {
        let m = count_multadds(&config, 720, 1280).unwrap() as f64;
        assert!(within(m, target, 0.05), "{config:?}: {m} vs {target}");
    }
}

#[test]
fn tiny_matches_hand_enumeration() {
    let cfg = LkdnConfig::tiny(2);
    // shallow 12·8 + 8·9; per block: 3·8·4 distill, 3·(64 + 72) refine,
    // 8·4 + 4·9 last distill, 16·8 fuse, 64 + 2·8·25 LKA, 64 transform, 2·8 norm;
    // fusion 16·8, smooth 64 + 72, reconstruction 8·12·9.
    let block = 96 + 408 + 68 + 128 + 464 + 64 + 16;
    let total = 168 + 2 * block + 128 + 136 + 864;
    assert_eq!(count_params(&cfg).unwrap(), total);
    assert_eq!(total, 3784);
    let weights_only = total - 2 * 16;
    assert_eq!(count_multadds(&cfg, 64, 64).unwrap(), (weights_only * 32 * 32) as u64);
    let model = Model::<f32>::init(cfg, 0).unwrap();
    assert_eq!(model.param_count(), total);
}

#[test]
fn no_biases_outside_rbsb() {
    for cfg in [LkdnConfig::lkdn(4), LkdnConfig::lkdn_s(4)] {
        for layer in layer_specs(&cfg).unwrap() {
            if let LayerKind::Conv(spec) = layer.kind {
                let rbsb = layer.name.contains(".r") && cfg.refinement_variant == lkdn_core::RefinementVariant::Rbsb;
                assert_eq!(spec.has_bias, rbsb, "{}", layer.name);
            }
        }
    }
}

#[test]
fn forward_records_the_enumerated_ops() {
    let cfg = LkdnConfig::tiny(2);
    let model = Model::<f32>::init(cfg, 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(Shape::new(1, 3, 17, 17)));
    let y = model.forward(&mut tape, &x).unwrap();
    assert_eq!(tape.value(&y).shape(), Shape::new(1, 3, 34, 34));
    // per block: 3 distill, 3·(2 conv + GELU) refine, 2 last distill, concat,
    // fuse, 3 LKA convs + product, transform, norm, skip add = 23.
    // outside: input replication, 2 shallow + concat, fusion, GELU, 2 smooth, add, recon, shuffle.
    assert_eq!(tape.op_count(), 1 + 2 + 2 * 23 + 8);
}

#[test]
fn receptive_field_of_attention() {
    assert_eq!(lka_receptive_field(), 17);
    // shallow 3×3, then per block four 3×3 depthwise stages and LKA (+16), then smoothing and reconstruction
    assert_eq!(receptive_field(&LkdnConfig::tiny(4)).unwrap(), 1 + 2 + 2 * (4 * 2 + 16) + 2 + 2);
}

#[test]
fn output_shape_for_every_scale() {
    for s in 2..=4 {
        let model = Model::<f32>::init(LkdnConfig::tiny(s), 1).unwrap();
        let y = model.infer(&Tensor::zeros(Shape::new(2, 3, 18, 20))).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 18 * s, 20 * s));
    }
}

#[test]
fn initialization_is_seeded() {
    let cfg = LkdnConfig::tiny(3);
    assert_eq!(Model::<f32>::init(cfg, 7).unwrap(), Model::<f32>::init(cfg, 7).unwrap());
    assert_ne!(Model::<f32>::init(cfg, 7).unwrap(), Model::<f32>::init(cfg, 8).unwrap());
}
