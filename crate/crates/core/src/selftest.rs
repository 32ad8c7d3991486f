//! Built-in consistency checks: primitives and modules against brute-force
//! reference implementations, plus the end-to-end gradient check of the
//! tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{window_attention, AttentionParams};
use crate::data::{collate, synth_scene};
use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::graph::{ConvKind, Graph};
use crate::loss::{mu_law, mu_law_inverse, psnr, ssim, total_loss, SsimConfig};
use crate::model::{forward, init_parameters, predict, ModelConfig, ModelParams};
use crate::ops::{gaussian_kernel, pixel_shuffle, pixel_unshuffle};
use crate::params::{ParameterSet, Specs};
use crate::tensor::Tensor;
use crate::transformer::{run_block, BlockParams, BlockShape};

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Reference window attention with explicit loops over windows, tokens and
/// heads. The shift mask is derived from whether each token's original row
/// and column wrapped around during the roll.
pub fn attention_oracle(
    x: &Tensor<f64>,
    params: &ParameterSet<f64>,
    prefix: &str,
    heads: usize,
    window: usize,
    shift: usize,
) -> Tensor<f64> {
    let [b, c, h, w] = x.dims4().expect("rank 4");
    let get = |n: &str| params.get(&format!("{prefix}.{n}")).expect("parameter").data().to_vec();
    let project = |name: &str, src: &[f64]| -> Vec<f64> {
        let wt = get(&format!("{name}.weight"));
        let bs = get(&format!("{name}.bias"));
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for o in 0..c {
                for p in 0..h * w {
                    let mut acc = bs[o];
                    for i in 0..c {
                        acc += wt[o * c + i] * src[(bi * c + i) * h * w + p];
                    }
                    out[(bi * c + o) * h * w + p] = acc;
                }
            }
        }
        out
    };
    // rolled[y][x] = x[(y + s) % h][(x + s) % w]
    let mut rolled = vec![0.0; x.len()];
    for p in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                rolled[(p * h + y) * w + xx] = x.data()[(p * h + (y + shift) % h) * w + (xx + shift) % w];
            }
        }
    }
    let (q, k, v) = (project("q", &rolled), project("k", &rolled), project("v", &rolled));
    let table = get("rel_bias");
    let side = 2 * window - 1;
    let dh = c / heads;
    let mut att = vec![0.0; x.len()];
    for bi in 0..b {
        for wy in (0..h).step_by(window) {
            for wx in (0..w).step_by(window) {
                let tokens: Vec<(usize, usize)> =
                    (0..window * window).map(|t| (wy + t / window, wx + t % window)).collect();
                for hd in 0..heads {
                    for &(yi, xi) in &tokens {
                        let mut logits = Vec::with_capacity(tokens.len());
                        for &(yj, xj) in &tokens {
                            let mut s = 0.0;
                            for d in 0..dh {
                                let ch = hd * dh + d;
                                s += q[((bi * c + ch) * h + yi) * w + xi] * k[((bi * c + ch) * h + yj) * w + xj];
                            }
                            s /= (dh as f64).sqrt();
                            let ry = yi + window - 1 - yj;
                            let rx = xi + window - 1 - xj;
                            s += table[hd * side * side + ry * side + rx];
                            let wrapped = |a: usize, n: usize| shift > 0 && a + shift >= n;
                            if wrapped(yi, h) != wrapped(yj, h) || wrapped(xi, w) != wrapped(xj, w) {
                                s += -1e9;
                            }
                            logits.push(s);
                        }
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for d in 0..dh {
                            let ch = hd * dh + d;
                            let mut acc = 0.0;
                            for (ej, &(yj, xj)) in e.iter().zip(&tokens) {
                                acc += ej / z * v[((bi * c + ch) * h + yj) * w + xj];
                            }
                            att[((bi * c + ch) * h + yi) * w + xi] = acc;
                        }
                    }
                }
            }
        }
    }
    let projected = project("proj", &att);
    let mut out = vec![0.0; x.len()];
    for p in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                out[(p * h + (y + shift) % h) * w + (xx + shift) % w] = projected[(p * h + y) * w + xx];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape")
}

/// Mean local SSIM with a direct 2-D window sum at every valid position.
pub fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>, cfg: &SsimConfig) -> f64 {
    let [n, c, h, w] = a.dims4().expect("rank 4");
    let k: Vec<f64> = gaussian_kernel(cfg.window, cfg.sigma);
    let s = cfg.window;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..n {
        for ch in 0..c {
            for y in 0..=h - s {
                for x in 0..=w - s {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..s {
                        for dx in 0..s {
                            let wt = k[dy] * k[dx];
                            let va = a.at4(bi, ch, y + dy, x + dx);
                            let vb = b.at4(bi, ch, y + dy, x + dx);
                            ma += wt * va;
                            mb += wt * vb;
                            saa += wt * va * va;
                            sbb += wt * vb * vb;
                            sab += wt * va * vb;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

pub fn psnr_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut e = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        e += (x - y) * (x - y);
    }
    e /= a.len() as f64;
    if e == 0.0 {
        99.0
    } else {
        (-10.0 * e.log10()).min(99.0)
    }
}

/// Finite-difference check of the full loss gradient for the tiny
/// configuration on a `2×18×32×32` batch of synthetic scenes.
///
/// Every parameter tensor is checked on `samples` random elements plus its
/// largest-gradient element and one random ±1 direction.
pub fn model_gradient_check(samples: usize, seed: u64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::tiny();
    let params: ParameterSet<f64> = init_parameters(&cfg, seed)?;
    let a = synth_scene(seed, 32, 32)?;
    let b = synth_scene(seed + 1, 32, 32)?;
    let (x, x2, gt) = collate(&[&a, &b])?;
    let (x, x2, gt): (Tensor<f64>, Tensor<f64>, Tensor<f64>) = (x.cast(), x2.cast(), gt.cast());
    let inputs: Vec<(String, Tensor<f64>)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    // The L1 term has a kink wherever pred == gt. A step of 1e-4 along a
    // whole-tensor direction carries some pixels across it.
    let check = GradCheck {
        step: 1e-5,
        rel_tol: 1e-3,
        samples_per_input: Some(samples),
        directional: true,
        seed,
        ..GradCheck::default()
    };
    let ssim_cfg = SsimConfig::default();
    check.run(&inputs, |g, vars| {
        let bound = params.attach(vars.to_vec())?;
        let p = ModelParams::bind(&bound, &cfg)?;
        let xv = g.constant(x.clone());
        let x2v = g.constant(x2.clone());
        let gv = g.constant(gt.clone());
        let y = forward(g, &p, &cfg, xv, x2v)?;
        Ok(total_loss(g, y, gv, cfg.mu, &ssim_cfg)?.total)
    })
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check except the end-to-end gradient check.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = random(vec![2, 3, 8, 6], &mut rng, -1.0, 1.0);
    out.push(check("pixel shuffle inverts unshuffle", || {
        let y = pixel_shuffle(&pixel_unshuffle(&x, 2)?, 2)?;
        Ok((y == x, "bit-exact".into()))
    }));

    let mut specs = Specs::new();
    specs.scope("attn", |s| AttentionParams::declare(s, 4, 2, 4));
    let mut aparams: ParameterSet<f64> = ParameterSet::initialize(&specs, seed);
    for t in aparams.tensors_mut() {
        *t = random(t.shape().to_vec(), &mut rng, -0.5, 0.5);
    }
    let xa = random(vec![1, 4, 8, 8], &mut rng, -1.0, 1.0);
    for (name, shift) in [("window attention matches oracle", 0), ("shifted attention matches oracle", 2)] {
        out.push(check(name, || {
            let mut g = Graph::new();
            let bound = aparams.bind_frozen(&mut g);
            let p = AttentionParams::bind(&bound.root().sub("attn"), 2)?;
            let xv = g.constant(xa.clone());
            let y = window_attention(&mut g, xv, &p, 4, shift)?;
            let err = g.value(y).max_abs_diff(&attention_oracle(&xa, &aparams, "attn", 2, 4, shift))?;
            Ok((err < 1e-6, format!("max abs diff {err:.3e}")))
        }));
    }

    out.push(check("mu-law endpoints and inverse", || {
        let t = random(vec![1, 1, 8, 8], &mut rng, 0.0, 1.0);
        let y = mu_law(&t, 5000.0)?;
        let back = mu_law_inverse(&y, 5000.0);
        let ends: Tensor<f64> = mu_law(&Tensor::new(vec![2], vec![0.0, 1.0])?, 5000.0)?;
        let err = back.max_abs_diff(&t)?;
        let ok = ends.data()[0] == 0.0 && (ends.data()[1] - 1.0).abs() < 1e-12 && err < 1e-6;
        Ok((ok, format!("round-trip error {err:.3e}")))
    }));

    let a = random(vec![1, 3, 16, 16], &mut rng, 0.0, 1.0);
    let b = random(vec![1, 3, 16, 16], &mut rng, 0.0, 1.0);
    out.push(check("metrics match explicit loops", || {
        let cfg = SsimConfig::default();
        let ds = (ssim(&a, &b, &cfg)? - ssim_oracle(&a, &b, &cfg)).abs();
        let dp = (psnr(&a, &b)? - psnr_oracle(&a, &b)).abs();
        let self_sim = ssim(&a, &a, &cfg)?;
        Ok((
            ds < 1e-9 && dp < 1e-9 && (self_sim - 1.0).abs() < 1e-9,
            format!("ssim diff {ds:.3e}, psnr diff {dp:.3e}"),
        ))
    }));

    out.push(check("zero projections make a block the identity", || {
        let shape = BlockShape {
            dim: 4,
            units: 2,
            heads: 2,
            window: 4,
            expansion: 2,
            gated: true,
        };
        let mut specs = Specs::new();
        specs.scope("blk", |s| BlockParams::declare(s, &shape));
        let mut p: ParameterSet<f64> = ParameterSet::initialize(&specs, seed);
        for (i, name) in p.names().to_vec().iter().enumerate() {
            if name.contains("proj.") || name.contains(".out.") || name.starts_with("blk.conv.") {
                let t = &mut p.tensors_mut()[i];
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let x = random(vec![1, 4, 8, 8], &mut rng, -1.0, 1.0);
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let bp = BlockParams::bind(&bound.root().sub("blk"), &shape)?;
        let xv = g.constant(x.clone());
        let y = run_block(&mut g, xv, &bp, 4)?;
        Ok((g.value(y) == &x, "bit-exact".into()))
    }));

    out.push(check("primitive gradients match finite differences", || {
        let inputs = vec![
            ("x".to_string(), random(vec![1, 2, 4, 4], &mut rng, -1.0, 1.0)),
            ("w".to_string(), random(vec![3, 2, 3, 3], &mut rng, -0.5, 0.5)),
            ("b".to_string(), random(vec![3], &mut rng, -0.1, 0.1)),
        ];
        let report = GradCheck::default().run(&inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], ConvKind::Full3x3)?;
            let y = g.gelu(y);
            let y = g.pixel_unshuffle(y, 2)?;
            let y = g.softmax(y, 1)?;
            let y = g.roll(y, 1, -1)?;
            let s = g.sigmoid(y);
            let z = g.mul(s, y)?;
            Ok(g.sum(z))
        })?;
        Ok((
            report.passed(),
            format!("{} comparisons, max abs error {:.3e}", report.checked, report.max_abs_error),
        ))
    }));

    out.push(check("output keeps odd input sizes and stays in (0, 1)", || {
        let cfg = ModelConfig::tiny();
        let params: ParameterSet<f32> = init_parameters(&cfg, seed)?;
        let x = Tensor::from_fn(vec![1, 18, 100, 75], |i| ((i * 37) % 101) as f32 / 101.0);
        let x2 = Tensor::from_fn(vec![1, 6, 100, 75], |i| ((i * 13) % 89) as f32 / 89.0);
        let y = predict(&params, &cfg, &x, &x2)?;
        let inside = y.data().iter().all(|&v| v > 0.0 && v < 1.0);
        Ok((y.shape() == [1, 3, 100, 75] && inside, format!("shape {:?}", y.shape())))
    }));

    out
}
