//! Layer normalization over the channel axis at every spatial position
//! (each pixel is a token).

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Float, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

struct Stats<T> {
    out: Tensor<T>,
    mean: Vec<T>,
    rstd: Vec<T>,
}

fn forward<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Stats<T>> {
    let [b, c, h, w] = x.dims4()?;
    if c == 0 {
        return Err(Error::InvalidArgument("layer norm over zero channels".into()));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ChannelMismatch {
            expected: c,
            got: gamma.len().min(beta.len()),
        });
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("layer norm eps must be positive".into()));
    }
    let p = h * w;
    let inv_c = T::one() / T::lit(c as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let mut mean = vec![T::zero(); b * p];
    let mut rstd = vec![T::zero(); b * p];
    for bi in 0..b {
        let xb = &xd[bi * c * p..(bi + 1) * c * p];
        let m = &mut mean[bi * p..(bi + 1) * p];
        for ch in 0..c {
            for (acc, &v) in m.iter_mut().zip(&xb[ch * p..(ch + 1) * p]) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v *= inv_c);
        let mut var = vec![T::zero(); p];
        for ch in 0..c {
            for ((acc, &v), &mu) in var.iter_mut().zip(&xb[ch * p..(ch + 1) * p]).zip(m.iter()) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        let r = &mut rstd[bi * p..(bi + 1) * p];
        for (ri, &v) in r.iter_mut().zip(&var) {
            *ri = T::one() / (v * inv_c + eps).sqrt();
        }
        let ob = &mut out[bi * c * p..(bi + 1) * c * p];
        for ch in 0..c {
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            let src = &xb[ch * p..(ch + 1) * p];
            let dst = &mut ob[ch * p..(ch + 1) * p];
            for i in 0..p {
                dst[i] = (src[i] - m[i]) * r[i] * gm + bt;
            }
        }
    }
    Ok(Stats {
        out: Tensor::new(x.shape().to_vec(), out)?,
        mean,
        rstd,
    })
}

/// Channel-wise layer normalization with affine `gamma`/`beta` of length C.
pub fn layer_norm<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    forward(x, gamma, beta, eps).map(|s| s.out)
}

pub(crate) fn layer_norm_backward<T: Float>(
    g: &Tensor<T>,
    (vx, x, need_x): (Var, &Tensor<T>, bool),
    (vgamma, gamma, need_gamma): (Var, &Tensor<T>, bool),
    (vbeta, need_beta): (Var, bool),
    mean: &[T],
    rstd: &[T],
) -> Result<Vec<(Var, Tensor<T>)>> {
    let [b, c, h, w] = x.dims4()?;
    let p = h * w;
    let (xd, gd, gm) = (x.data(), g.data(), gamma.data());
    let inv_c = T::one() / T::lit(c as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); if need_x { xd.len() } else { 0 }];
    let mut xhat = vec![T::zero(); c * p];
    for bi in 0..b {
        let xb = &xd[bi * c * p..(bi + 1) * c * p];
        let gb = &gd[bi * c * p..(bi + 1) * c * p];
        let m = &mean[bi * p..(bi + 1) * p];
        let r = &rstd[bi * p..(bi + 1) * p];
        for ch in 0..c {
            for i in 0..p {
                xhat[ch * p + i] = (xb[ch * p + i] - m[i]) * r[i];
            }
        }
        for ch in 0..c {
            let mut sg = T::zero();
            let mut sb = T::zero();
            for i in 0..p {
                sg += gb[ch * p + i] * xhat[ch * p + i];
                sb += gb[ch * p + i];
            }
            dgamma[ch] += sg;
            dbeta[ch] += sb;
        }
        if need_x {
            // dx = rstd · (dxhat − mean(dxhat) − xhat · mean(dxhat · xhat))
            let mut m1 = vec![T::zero(); p];
            let mut m2 = vec![T::zero(); p];
            for ch in 0..c {
                for i in 0..p {
                    let dxh = gb[ch * p + i] * gm[ch];
                    m1[i] += dxh;
                    m2[i] += dxh * xhat[ch * p + i];
                }
            }
            let db = &mut dx[bi * c * p..(bi + 1) * c * p];
            for ch in 0..c {
                for i in 0..p {
                    let dxh = gb[ch * p + i] * gm[ch];
                    db[ch * p + i] = r[i] * (dxh - m1[i] * inv_c - xhat[ch * p + i] * m2[i] * inv_c);
                }
            }
        }
    }
    let mut out = Vec::new();
    if need_gamma {
        out.push((vgamma, Tensor::new(vec![c], dgamma)?));
    }
    if need_beta {
        out.push((vbeta, Tensor::new(vec![c], dbeta)?));
    }
    if need_x {
        out.push((vx, Tensor::new(x.shape().to_vec(), dx)?));
    }
    Ok(out)
}

impl<T: Float> Graph<T> {
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.record(
            s.out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: s.mean,
                rstd: s.rstd,
            },
            &[x, gamma, beta],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_over_channels_maps_to_beta() {
        let x = Tensor::<f64>::full(vec![1, 3, 2, 2], 4.5);
        let y = layer_norm(&x, &Tensor::ones(vec![3]), &Tensor::zeros(vec![3]), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_channel_symmetry() {
        let x = Tensor::new(vec![1, 2, 1, 1], vec![1.0f64, 3.0]).unwrap();
        let y = layer_norm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn random_input_is_standardized() {
        let x = Tensor::from_fn(vec![2, 16, 3, 5], |i| ((i * 7919) % 101) as f64 * 0.3 - 12.0);
        let y = layer_norm(&x, &Tensor::ones(vec![16]), &Tensor::zeros(vec![16]), 1e-6).unwrap();
        for b in 0..2 {
            for yy in 0..3 {
                for xx in 0..5 {
                    let vals: Vec<f64> = (0..16).map(|c| y.at4(b, c, yy, xx)).collect();
                    let m = vals.iter().sum::<f64>() / 16.0;
                    let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 16.0;
                    assert!(m.abs() < 1e-6);
                    assert!((v - 1.0).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn rejects_zero_channels_and_bad_affine() {
        let x = Tensor::<f64>::zeros(vec![1, 0, 2, 2]);
        assert!(layer_norm(&x, &Tensor::zeros(vec![0]), &Tensor::zeros(vec![0]), 1e-6).is_err());
        let x = Tensor::<f64>::zeros(vec![1, 3, 2, 2]);
        assert!(layer_norm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![3]), 1e-6).is_err());
    }
}
