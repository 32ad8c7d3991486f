//! Separable per-channel filtering with "valid" borders, used for the local
//! statistics of SSIM.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{axpy, Float, Tensor};

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel<T: Float>(size: usize, sigma: f64) -> Vec<T> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / total)).collect()
}

/// Correlates every channel with `kernel ⊗ kernel`, keeping only positions
/// where the window fits: `(B, C, H, W) → (B, C, H−k+1, W−k+1)`.
pub fn blur_valid<T: Float>(x: &Tensor<T>, kernel: &[T]) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let k = kernel.len();
    if k == 0 || h < k || w < k {
        return Err(Error::ShapeMismatch(format!(
            "image {h}×{w} smaller than the {k}×{k} filter window"
        )));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let xd = x.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for y in 0..h {
            let trow = &mut tmp[y * ow..(y + 1) * ow];
            for (t, &kv) in kernel.iter().enumerate() {
                axpy(trow, kv, &src[y * w + t..y * w + t + ow]);
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (t, &kv) in kernel.iter().enumerate() {
                axpy(drow, kv, &tmp[(y + t) * ow..(y + t + 1) * ow]);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub(crate) fn blur_valid_backward<T: Float>(g: &Tensor<T>, src_shape: &[usize], kernel: &[T]) -> Result<Tensor<T>> {
    let [b, c, h, w] = [src_shape[0], src_shape[1], src_shape[2], src_shape[3]];
    let k = kernel.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let gd = g.data();
    let mut out = vec![T::zero(); b * c * h * w];
    let mut dtmp = vec![T::zero(); h * ow];
    for p in 0..b * c {
        let gp = &gd[p * oh * ow..(p + 1) * oh * ow];
        dtmp.iter_mut().for_each(|v| *v = T::zero());
        for y in 0..oh {
            for (t, &kv) in kernel.iter().enumerate() {
                axpy(&mut dtmp[(y + t) * ow..(y + t + 1) * ow], kv, &gp[y * ow..(y + 1) * ow]);
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let trow = &dtmp[y * ow..(y + 1) * ow];
            for (t, &kv) in kernel.iter().enumerate() {
                axpy(&mut dst[y * w + t..y * w + t + ow], kv, trow);
            }
        }
    }
    Tensor::new(src_shape.to_vec(), out)
}

impl<T: Float> Graph<T> {
    pub fn blur_valid(&mut self, x: Var, kernel: &[T]) -> Result<Var> {
        let out = blur_valid(self.value(x), kernel)?;
        Ok(self.record(
            out,
            Op::GaussianBlur {
                x,
                kernel: kernel.to_vec(),
            },
            &[x],
        ))
    }
}
