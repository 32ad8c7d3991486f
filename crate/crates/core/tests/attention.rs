mod common;

use proptest::prelude::*;
use swinhdr::attention::{build_shift_mask, window_attention, AttentionParams, MASKED_LOGIT};
use swinhdr::gradcheck::GradCheck;
use swinhdr::ops::softmax;
use swinhdr::params::Specs;
use swinhdr::{Error, Graph, ParameterSet, Tensor};

fn params(dim: usize, heads: usize, window: usize, seed: u64) -> ParameterSet<f64> {
    let mut specs = Specs::new();
    specs.scope("a", |s| AttentionParams::declare(s, dim, heads, window));
    let mut p = ParameterSet::initialize(&specs, seed);
    common::randomize(&mut p, &mut common::rng(seed ^ 0x5eed), 0.6);
    p
}

fn run(p: &ParameterSet<f64>, x: &Tensor<f64>, heads: usize, window: usize, shift: usize) -> Tensor<f64> {
    let mut g = Graph::new();
    let bound = p.bind_frozen(&mut g);
    let ap = AttentionParams::bind(&bound.root().sub("a"), heads).unwrap();
    let xv = g.constant(x.clone());
    let y = window_attention(&mut g, xv, &ap, window, shift).unwrap();
    g.value(y).clone()
}

#[test]
fn matches_region_oracle() {
    let mut r = common::rng(11);
    for (shift, seed) in [(0, 1), (2, 2), (0, 3), (2, 4)] {
        let p = params(4, 2, 4, seed);
        let x = common::uniform(&[1, 4, 8, 8], &mut r, -1.0, 1.0);
        let got = run(&p, &x, 2, 4, shift);
        let want = common::region_attention(&x, &p, "a", 2, 4, shift);
        let err = got.max_abs_diff(&want).unwrap();
        assert!(err < 1e-6, "shift {shift}: {err:e}");
    }
}

#[test]
fn matches_region_oracle_on_rectangles() {
    let mut r = common::rng(12);
    let p = params(6, 3, 4, 9);
    let x = common::uniform(&[2, 6, 8, 12], &mut r, -1.0, 1.0);
    for shift in [0, 1, 2, 3] {
        let err = run(&p, &x, 3, 4, shift).max_abs_diff(&common::region_attention(&x, &p, "a", 3, 4, shift)).unwrap();
        assert!(err < 1e-6, "shift {shift}: {err:e}");
    }
}

#[test]
fn constant_values_give_constant_output() {
    let mut p = params(4, 2, 4, 5);
    *p.get_mut("a.v.weight").unwrap() = Tensor::zeros(vec![4, 4, 1, 1]);
    let c = [0.3, -0.2, 0.7, 0.1];
    *p.get_mut("a.v.bias").unwrap() = Tensor::new(vec![4], c.to_vec()).unwrap();
    let w = p.get("a.proj.weight").unwrap().data().to_vec();
    let b = p.get("a.proj.bias").unwrap().data().to_vec();
    let expect: Vec<f64> = (0..4).map(|o| b[o] + (0..4).map(|i| w[o * 4 + i] * c[i]).sum::<f64>()).collect();
    let x = common::uniform(&[1, 4, 8, 8], &mut common::rng(1), -1.0, 1.0);
    for shift in [0, 2] {
        let y = run(&p, &x, 2, 4, shift);
        for ch in 0..4 {
            for px in 0..64 {
                assert!((y.data()[ch * 64 + px] - expect[ch]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_token_windows_pass_values_through() {
    let p = params(4, 1, 1, 6);
    let x = common::uniform(&[1, 4, 3, 5], &mut common::rng(2), -1.0, 1.0);
    let y = run(&p, &x, 1, 1, 0);
    let get = |n: &str| p.get(n).unwrap().data().to_vec();
    let v = common::pointwise(x.data(), 1, 4, 15, &get("a.v.weight"), &get("a.v.bias"));
    let want = common::pointwise(&v, 1, 4, 15, &get("a.proj.weight"), &get("a.proj.bias"));
    let err = y.max_abs_diff(&Tensor::new(vec![1, 4, 3, 5], want).unwrap()).unwrap();
    assert!(err < 1e-12);
}

#[test]
fn unshifted_attention_commutes_with_window_permutation() {
    let p = params(4, 2, 4, 7);
    let x = common::uniform(&[1, 4, 8, 8], &mut common::rng(3), -1.0, 1.0);
    // swap the top-left and bottom-right windows
    let swap = |t: &Tensor<f64>| {
        let mut out = t.clone();
        for c in 0..4 {
            for y in 0..4 {
                for xx in 0..4 {
                    let a = t.at4(0, c, y, xx);
                    let b = t.at4(0, c, y + 4, xx + 4);
                    out.set4(0, c, y, xx, b);
                    out.set4(0, c, y + 4, xx + 4, a);
                }
            }
        }
        out
    };
    assert_eq!(run(&p, &swap(&x), 2, 4, 0), swap(&run(&p, &x, 2, 4, 0)));
}

#[test]
fn shift_mask_examples() {
    let zero = build_shift_mask(16, 16, 8, 0).unwrap();
    assert!(zero.values.iter().all(|v| *v == 0.0));
    assert_eq!(zero.windows, 4);

    let m = build_shift_mask(8, 8, 8, 4).unwrap();
    let mut counts = [0usize; 4];
    for &l in &m.labels {
        counts[l] += 1;
    }
    assert_eq!(counts, [16; 4]);
    let block = m.block(0);
    for i in 0..64 {
        for j in 0..64 {
            assert_eq!(block[i * 64 + j], block[j * 64 + i]);
            let same = m.labels[i] == m.labels[j];
            assert_eq!(block[i * 64 + j], if same { 0.0 } else { MASKED_LOGIT });
        }
    }
    assert!(matches!(build_shift_mask(8, 8, 4, 4), Err(Error::InvalidArgument(_))));
    assert!(matches!(build_shift_mask(8, 6, 4, 2), Err(Error::Divisibility(_))));
}

#[test]
fn masked_logit_vanishes_under_softmax() {
    let y = softmax(&Tensor::new(vec![1, 2], vec![0.0, MASKED_LOGIT]).unwrap(), 1).unwrap();
    assert!(y.data()[1] < 1e-30);
    let y32 = softmax(&Tensor::new(vec![1, 2], vec![3.0f32, MASKED_LOGIT as f32]).unwrap(), 1).unwrap();
    assert!(y32.all_finite() && y32.data()[1] == 0.0);
}

#[test]
fn attention_gradients() {
    let p = params(4, 2, 4, 8);
    let mut inputs: Vec<(String, Tensor<f64>)> = p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    inputs.push(("x".into(), common::uniform(&[1, 4, 8, 8], &mut common::rng(4), -1.0, 1.0)));
    let names = p.names().to_vec();
    for shift in [0, 2] {
        let check = GradCheck {
            samples_per_input: Some(12),
            directional: true,
            seed: shift as u64,
            ..GradCheck::default()
        };
        let report = check
            .run(&inputs, |g, vars| {
                let np = names.len();
                let bound = p.attach(vars[..np].to_vec())?;
                let ap = AttentionParams::bind(&bound.root().sub("a"), 2)?;
                let y = window_attention(g, vars[np], &ap, 4, shift)?;
                let s = g.sigmoid(y);
                Ok(g.mean(s))
            })
            .unwrap();
        assert!(report.passed(), "shift {shift}: {:?}", report.failures);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logit_offsets_cancel(seed in any::<u64>(), offset in -50.0f64..50.0, shift in 0usize..4) {
        let p = params(4, 2, 4, seed);
        let x = common::uniform(&[1, 4, 8, 8], &mut common::rng(seed), -1.0, 1.0);
        let mut q = p.clone();
        let t = q.get_mut("a.rel_bias").unwrap();
        *t = t.map(|v| v + offset);
        let err = run(&p, &x, 2, 4, shift).max_abs_diff(&run(&q, &x, 2, 4, shift)).unwrap();
        prop_assert!(err < 1e-6);
    }

    #[test]
    fn shifted_attention_matches_oracle(seed in any::<u64>(), shift in 0usize..4, hm in 1usize..4, wm in 1usize..4) {
        let p = params(4, 2, 4, seed);
        let x = common::uniform(&[1, 4, 4 * hm, 4 * wm], &mut common::rng(seed), -1.0, 1.0);
        let err = run(&p, &x, 2, 4, shift).max_abs_diff(&common::region_attention(&x, &p, "a", 2, 4, shift)).unwrap();
        prop_assert!(err < 1e-6);
    }
}
