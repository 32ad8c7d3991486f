//! Reference implementations shared by the integration tests. None of these
//! call into the library's kernels; they work on plain slices with loops.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinhdr::{GatingMode, ModelConfig, ParameterSet, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Replaces every tensor of `p` with uniform noise in `±scale`.
pub fn randomize(p: &mut ParameterSet<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for t in p.tensors_mut() {
        *t = uniform(t.shape(), rng, -scale, scale);
    }
}

/// `out[o] = Σ_i w[o, i] · x[i] + b[o]` at every pixel of a `(B, C, H, W)` buffer.
pub fn pointwise(x: &[f64], b: usize, cin: usize, hw: usize, w: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let mut out = vec![0.0; b * cout * hw];
    for n in 0..b {
        for o in 0..cout {
            for p in 0..hw {
                let mut acc = bias[o];
                for i in 0..cin {
                    acc += w[o * cin + i] * x[(n * cin + i) * hw + p];
                }
                out[(n * cout + o) * hw + p] = acc;
            }
        }
    }
    out
}

/// Index groups along one axis of length `n` for window `m` and shift `s`:
/// the windows of the shifted grid, with the wrapped window split in its
/// two contiguous pieces `[0, s)` and `[n − m + s, n)`.
fn axis_groups(n: usize, m: usize, s: usize) -> Vec<usize> {
    (0..n)
        .map(|i| if i < s { usize::MAX } else { (i - s) / m })
        .collect()
}

/// Dense attention over each group of tokens sharing a row group and a column
/// group, computed in the original frame without rolling or masks.
pub fn region_attention(
    x: &Tensor<f64>,
    params: &ParameterSet<f64>,
    prefix: &str,
    heads: usize,
    m: usize,
    shift: usize,
) -> Tensor<f64> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let get = |n: &str| params.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
    let proj = |name: &str, src: &[f64]| pointwise(src, b, c, hw, &get(&format!("{name}.weight")), &get(&format!("{name}.bias")));
    let (q, k, v) = (proj("q", x.data()), proj("k", x.data()), proj("v", x.data()));
    let table = get("rel_bias");
    let side = 2 * m - 1;
    let (gy, gx) = (axis_groups(h, m, shift), axis_groups(w, m, shift));
    let dh = c / heads;
    let at = |buf: &[f64], n: usize, ch: usize, y: usize, xx: usize| buf[((n * c + ch) * h + y) * w + xx];

    let mut att = vec![0.0; x.len()];
    for n in 0..b {
        for yi in 0..h {
            for xi in 0..w {
                let peers: Vec<(usize, usize)> = (0..h)
                    .flat_map(|y| (0..w).map(move |xx| (y, xx)))
                    .filter(|&(y, xx)| gy[y] == gy[yi] && gx[xx] == gx[xi])
                    .collect();
                for hd in 0..heads {
                    let logits: Vec<f64> = peers
                        .iter()
                        .map(|&(yj, xj)| {
                            let dot: f64 = (0..dh)
                                .map(|d| at(&q, n, hd * dh + d, yi, xi) * at(&k, n, hd * dh + d, yj, xj))
                                .sum();
                            let ry = (yi as isize - yj as isize + m as isize - 1) as usize;
                            let rx = (xi as isize - xj as isize + m as isize - 1) as usize;
                            dot / (dh as f64).sqrt() + table[hd * side * side + ry * side + rx]
                        })
                        .collect();
                    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for d in 0..dh {
                        let ch = hd * dh + d;
                        att[((n * c + ch) * h + yi) * w + xi] =
                            peers.iter().zip(&e).map(|(&(yj, xj), &ej)| ej / z * at(&v, n, ch, yj, xj)).sum();
                    }
                }
            }
        }
    }
    let out = proj("proj", &att);
    Tensor::new(s.to_vec(), out).unwrap()
}

fn gaussian_weights(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

/// Mean SSIM over every channel and every fully contained 11×11 Gaussian
/// window, with the 2-D weights formed as an outer product.
pub fn ssim_loops(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let g = gaussian_weights(11, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut total, mut count) = (0.0, 0usize);
    for p in 0..planes {
        let pa = &a.data()[p * h * w..(p + 1) * h * w];
        let pb = &b.data()[p * h * w..(p + 1) * h * w];
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for u in 0..11 {
                    for v in 0..11 {
                        let wt = g[u] * g[v];
                        let (va, vb) = (pa[(y + u) * w + x + v], pb[(y + u) * w + x + v]);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn psnr_loops(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        99.0
    } else {
        (-10.0 * mse.log10()).min(99.0)
    }
}

pub fn mu_compress(x: f64, mu: f64) -> f64 {
    (1.0 + mu * x).ln() / (1.0 + mu).ln()
}

/// Shared-exponent decode of one Radiance pixel.
pub fn rgbe_hand(q: [u8; 4]) -> [f64; 3] {
    if q[3] == 0 {
        return [0.0; 3];
    }
    let f = 2f64.powi(q[3] as i32 - 128) / 256.0;
    [0, 1, 2].map(|i| (q[i] as f64 + 0.5) * f)
}

/// Parameter count of a network, counted layer by layer from the layout:
/// every conv has a bias, norms carry a scale and an offset.
pub fn closed_form_parameters(cfg: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let dw = |c: usize| 9 * c + c;
    let unit = |d: usize, h: usize, gated: bool| {
        let hidden = cfg.expansion * d;
        let attn = 4 * conv(d, d, 1) + h * (2 * cfg.window - 1).pow(2);
        let ffn = if gated {
            2 * d + 2 * (conv(d, hidden, 1) + dw(hidden)) + conv(hidden, d, 1)
        } else {
            2 * d + conv(d, hidden, 1) + conv(hidden, d, 1)
        };
        2 * (2 * d + attn + ffn)
    };
    let block = |scale: usize, n: usize, gated: bool| {
        let d = cfg.base_width << scale;
        n * unit(d, cfg.heads[scale], gated) + conv(d, d, 3)
    };
    let enc_gated = |i: usize| match cfg.gating {
        GatingMode::All => true,
        GatingMode::First => i == 0,
        GatingMode::None => false,
    };
    let dec_gated = cfg.gating == GatingMode::All;
    let c = cfg.base_width;
    let mut total = conv(18, c, 3) + conv(6, c, 3) + conv(c, 3, 3);
    for i in 0..cfg.scale_count {
        total += block(i, cfg.rgst_counts[i], enc_gated(i));
        if i > 0 {
            let prev = c << (i - 1);
            total += conv(4 * prev, 2 * prev, 1);
            total += conv(2 * prev, 4 * prev, 1) + conv(2 * prev, prev, 1);
            total += block(i - 1, cfg.rgst_counts[i - 1], dec_gated);
        }
    }
    total + block(0, cfg.refinement_count, dec_gated)
}
