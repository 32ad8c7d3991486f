mod common;

use swinhdr::ops::{crop, reflect_pad, sigmoid_scalar};
use swinhdr::{init_parameters, predict, Error, GatingMode, ModelConfig, ParameterSet, Tensor};

fn inputs(h: usize, w: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut r = common::rng(seed);
    let x: Tensor<f32> = common::uniform(&[1, 18, h, w], &mut r, 0.0, 1.0).cast();
    let x2: Tensor<f32> = common::uniform(&[1, 6, h, w], &mut r, 0.0, 1.0).cast();
    (x, x2)
}

#[test]
fn parameter_counts_match_closed_form() {
    let modes = [GatingMode::All, GatingMode::First, GatingMode::None];
    for base in [ModelConfig::full(), ModelConfig::desk(), ModelConfig::tiny()] {
        for mode in modes {
            let cfg = base.clone().with_gating(mode);
            assert_eq!(cfg.parameter_count().unwrap(), common::closed_form_parameters(&cfg), "{cfg:?}");
        }
    }
    assert_eq!(ModelConfig::desk().parameter_count().unwrap(), 2_455_815);
    assert_eq!(ModelConfig::tiny().parameter_count().unwrap(), 245_611);
    assert_eq!(ModelConfig::tiny().with_gating(GatingMode::None).parameter_count().unwrap(), 202_763);
}

#[test]
fn full_preset_unit_counts_and_heads() {
    let full = ModelConfig::full();
    assert_eq!(full.rgst_counts, [2, 3, 3, 4]);
    assert_eq!(full.refinement_count, 2);
    assert_eq!(full.heads, [1, 2, 4, 4]);
    assert_eq!(full.window, 8);
    assert_eq!(full.pad_multiple(), 64);
}

#[test]
fn validation_rejects_bad_configs() {
    let c1 = ModelConfig {
        base_width: 1,
        ..ModelConfig::desk()
    };
    assert!(matches!(c1.validate(), Err(Error::InvalidConfig(_))));
    assert!(ModelConfig::desk().validate().is_ok());
    let odd_heads = ModelConfig {
        heads: vec![3, 2, 4, 4],
        ..ModelConfig::desk()
    };
    assert!(matches!(odd_heads.validate(), Err(Error::InvalidConfig(_))));
    let short = ModelConfig {
        rgst_counts: vec![1, 1],
        ..ModelConfig::tiny()
    };
    assert!(short.validate().is_err());
    let no_window = ModelConfig {
        window: 0,
        ..ModelConfig::tiny()
    };
    assert!(no_window.validate().is_err());
    assert!(c1.specs().is_err());
}

#[test]
fn config_text_round_trip() {
    for cfg in [ModelConfig::full(), ModelConfig::tiny().with_gating(GatingMode::First)] {
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
    let t = ModelConfig::from_text("preset=tiny\n# comment\ngating=none\n").unwrap();
    assert_eq!(t, ModelConfig::tiny().with_gating(GatingMode::None));
    assert!(ModelConfig::from_text("bogus=1\n").is_err());
    assert!(ModelConfig::from_text("window=4\npreset=tiny\n").is_err());
    assert!(ModelConfig::from_text("base_width=1\n").is_err());
}

#[test]
fn odd_sizes_keep_shape_and_range() {
    let cfg = ModelConfig::tiny();
    let p: ParameterSet<f32> = init_parameters(&cfg, 0).unwrap();
    for (h, w) in [(100, 75), (33, 40), (8, 8)] {
        let (x, x2) = inputs(h, w, h as u64);
        let y = predict(&p, &cfg, &x, &x2).unwrap();
        assert_eq!(y.shape(), [1, 3, h, w]);
        assert!(y.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let cfg = ModelConfig::tiny();
    let p: ParameterSet<f32> = init_parameters(&cfg, 0).unwrap();
    let (x, _) = inputs(16, 16, 1);
    let (_, x2) = inputs(16, 20, 1);
    assert!(predict(&p, &cfg, &x, &x2).is_err());
    let mut bad = x.clone();
    bad.data_mut()[3] = f32::NAN;
    let (_, x2) = inputs(16, 16, 1);
    assert!(predict(&p, &cfg, &bad, &x2).is_err());
}

#[test]
fn inference_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let a: ParameterSet<f32> = init_parameters(&cfg, 4).unwrap();
    let b: ParameterSet<f32> = init_parameters(&cfg, 4).unwrap();
    assert_eq!(a, b);
    let c: ParameterSet<f32> = init_parameters(&cfg, 5).unwrap();
    assert_ne!(a, c);
    let (x, x2) = inputs(24, 40, 2);
    let y1 = predict(&a, &cfg, &x, &x2).unwrap();
    let y2 = predict(&a, &cfg, &x, &x2).unwrap();
    assert_eq!(y1.data(), y2.data());
}

#[test]
fn gating_modes_share_shapes_and_differ_in_feed_forward() {
    let (x, x2) = inputs(32, 32, 3);
    let all: ParameterSet<f32> = init_parameters(&ModelConfig::tiny(), 0).unwrap();
    for mode in [GatingMode::All, GatingMode::First, GatingMode::None] {
        let cfg = ModelConfig::tiny().with_gating(mode);
        let p: ParameterSet<f32> = init_parameters(&cfg, 0).unwrap();
        assert_eq!(predict(&p, &cfg, &x, &x2).unwrap().shape(), [1, 3, 32, 32]);
        for name in p.names() {
            if !name.contains(".ffn") {
                assert_eq!(p.get(name).unwrap().shape(), all.get(name).unwrap().shape(), "{name}");
            }
        }
        let gated_enc: Vec<bool> = (1..=4).map(|i| p.get(&format!("enc{i}.unit0.ffn1.gate_pw.weight")).is_some()).collect();
        let expect = match mode {
            GatingMode::All => [true; 4],
            GatingMode::First => [true, false, false, false],
            GatingMode::None => [false; 4],
        };
        assert_eq!(gated_enc, expect);
        assert_eq!(p.get("refine.unit0.ffn2.gate_pw.weight").is_some(), mode == GatingMode::All);
    }
}

#[test]
fn zero_prediction_weights_give_constant_output() {
    let cfg = ModelConfig::tiny();
    let mut p: ParameterSet<f32> = init_parameters(&cfg, 1).unwrap();
    *p.get_mut("pred.weight").unwrap() = Tensor::zeros(vec![3, 8, 3, 3]);
    let bias = Tensor::new(vec![3], vec![0.3f32, -1.2, 2.0]).unwrap();
    *p.get_mut("pred.bias").unwrap() = bias.clone();
    let (x, x2) = inputs(20, 28, 4);
    let y = predict(&p, &cfg, &x, &x2).unwrap();
    for c in 0..3 {
        let want = sigmoid_scalar(bias.data()[c]);
        assert!(y.data()[c * 560..(c + 1) * 560].iter().all(|v| *v == want));
    }
}

#[test]
fn padding_then_cropping_is_consistent() {
    let cfg = ModelConfig::tiny();
    let p: ParameterSet<f32> = init_parameters(&cfg, 2).unwrap();
    let (x, x2) = inputs(40, 50, 5);
    let y = predict(&p, &cfg, &x, &x2).unwrap();
    let pad = [0, 24, 0, 14];
    let xp = reflect_pad(&x, pad).unwrap();
    let x2p = reflect_pad(&x2, pad).unwrap();
    assert_eq!(xp.shape()[2..], [64, 64]);
    let yp = predict(&p, &cfg, &xp, &x2p).unwrap();
    assert_eq!(crop(&yp, 0, 0, 40, 50).unwrap().data(), y.data());
}

#[test]
fn window_footprint_per_scale() {
    let full = ModelConfig::full();
    let f = full.count_receptive();
    assert_eq!(f, [8, 16, 32, 64]);
    assert!(f[3] >= 64);
}
