//! Fused windowed multi-head attention core.
//!
//! Takes already-projected query/key/value maps in image layout and, for
//! every `M×M` window and head, computes
//! `softmax(Q·Kᵀ/√d + bias[rel(i,j)] + mask) · V`, writing the result back in
//! image layout. Projections, shifting and the output projection are composed
//! around it by [`crate::attention::window_attention`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{dot, Float, Tensor};

/// Side length of the relative-position bias table, `2M − 1`.
pub fn bias_table_side(window: usize) -> usize {
    2 * window - 1
}

/// Flat bias-table index for every (query, key) token pair of a window.
pub fn relative_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let side = bias_table_side(window);
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push(dy * side + dx);
        }
    }
    idx
}

struct Layout {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    head_dim: usize,
    window: usize,
    tokens: usize,
    windows_per_image: usize,
}

impl Layout {
    fn new(q: &[usize], bias: &[usize], heads: usize, window: usize, mask_len: Option<usize>) -> Result<Self> {
        let &[batch, channels, height, width] = q else {
            return Err(Error::NotRank4(q.to_vec()));
        };
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Divisibility(format!(
                "{heads} heads must divide {channels} channels"
            )));
        }
        if window == 0 || height % window != 0 || width % window != 0 {
            return Err(Error::Divisibility(format!(
                "window {window} must divide {height}×{width}"
            )));
        }
        let side = bias_table_side(window);
        if bias != [heads, side * side] {
            return Err(Error::ShapeMismatch(format!(
                "bias table {bias:?}, expected [{heads}, {}]",
                side * side
            )));
        }
        let tokens = window * window;
        let windows_per_image = (height / window) * (width / window);
        if let Some(len) = mask_len {
            if len != windows_per_image * tokens * tokens {
                return Err(Error::ShapeMismatch(format!(
                    "mask holds {len} entries, expected {}",
                    windows_per_image * tokens * tokens
                )));
            }
        }
        Ok(Layout {
            batch,
            channels,
            height,
            width,
            head_dim: channels / heads,
            window,
            tokens,
            windows_per_image,
        })
    }

    /// Flat pixel offsets of the tokens of window `win`.
    fn positions(&self, win: usize, out: &mut Vec<usize>) {
        let per_row = self.width / self.window;
        let (wy, wx) = (win / per_row, win % per_row);
        out.clear();
        for ty in 0..self.window {
            for tx in 0..self.window {
                out.push((wy * self.window + ty) * self.width + wx * self.window + tx);
            }
        }
    }
}

/// Copies head `h` of the window tokens into a `tokens × head_dim` block.
fn gather<T: Float>(l: &Layout, src: &[T], b: usize, h: usize, pos: &[usize], dst: &mut [T]) {
    let hw = l.height * l.width;
    for d in 0..l.head_dim {
        let plane = &src[(b * l.channels + h * l.head_dim + d) * hw..][..hw];
        for (t, &p) in pos.iter().enumerate() {
            dst[t * l.head_dim + d] = plane[p];
        }
    }
}

fn scatter_add<T: Float>(l: &Layout, dst: &mut [T], b: usize, h: usize, pos: &[usize], src: &[T]) {
    let hw = l.height * l.width;
    for d in 0..l.head_dim {
        let plane = &mut dst[(b * l.channels + h * l.head_dim + d) * hw..][..hw];
        for (t, &p) in pos.iter().enumerate() {
            plane[p] += src[t * l.head_dim + d];
        }
    }
}

pub(crate) struct Forward<T> {
    pub out: Tensor<T>,
    pub probs: Vec<T>,
}

pub(crate) fn forward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    heads: usize,
    window: usize,
    mask: Option<&[T]>,
) -> Result<Forward<T>> {
    q.expect_same_shape(k)?;
    q.expect_same_shape(v)?;
    let l = Layout::new(q.shape(), bias.shape(), heads, window, mask.map(|m| m.len()))?;
    let (n, dh) = (l.tokens, l.head_dim);
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let rel = relative_index(window);
    let bias_side = bias.shape()[1];

    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); l.batch * l.windows_per_image * heads * n * n];
    let mut pos = Vec::with_capacity(n);
    let (mut qt, mut kt, mut vt, mut ot) = (
        vec![T::zero(); n * dh],
        vec![T::zero(); n * dh],
        vec![T::zero(); n * dh],
        vec![T::zero(); n * dh],
    );
    for b in 0..l.batch {
        for win in 0..l.windows_per_image {
            l.positions(win, &mut pos);
            let wmask = mask.map(|m| &m[win * n * n..(win + 1) * n * n]);
            for h in 0..heads {
                gather(&l, q.data(), b, h, &pos, &mut qt);
                gather(&l, k.data(), b, h, &pos, &mut kt);
                gather(&l, v.data(), b, h, &pos, &mut vt);
                let btab = &bias.data()[h * bias_side..(h + 1) * bias_side];
                let base = ((b * l.windows_per_image + win) * heads + h) * n * n;
                let a = &mut probs[base..base + n * n];
                for i in 0..n {
                    let qi = &qt[i * dh..(i + 1) * dh];
                    let row = &mut a[i * n..(i + 1) * n];
                    let mut max = T::neg_infinity();
                    for j in 0..n {
                        let mut s = dot(qi, &kt[j * dh..(j + 1) * dh]) * scale + btab[rel[i * n + j]];
                        if let Some(m) = wmask {
                            s += m[i * n + j];
                        }
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let inv = T::one() / total;
                    row.iter_mut().for_each(|s| *s *= inv);
                }
                ot.iter_mut().for_each(|o| *o = T::zero());
                for i in 0..n {
                    let oi = &mut ot[i * dh..(i + 1) * dh];
                    for j in 0..n {
                        let aij = a[i * n + j];
                        for (o, &vv) in oi.iter_mut().zip(&vt[j * dh..(j + 1) * dh]) {
                            *o += aij * vv;
                        }
                    }
                }
                scatter_add(&l, &mut out, b, h, &pos, &ot);
            }
        }
    }
    Ok(Forward {
        out: Tensor::new(q.shape().to_vec(), out)?,
        probs,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Float>(
    g: &Tensor<T>,
    vars: [Var; 3],
    [q, k, v]: [&Tensor<T>; 3],
    bias_var: Var,
    bias_shape: &[usize],
    heads: usize,
    window: usize,
    mask: Option<&[T]>,
    probs: &[T],
) -> Result<Vec<(Var, Tensor<T>)>> {
    let l = Layout::new(q.shape(), bias_shape, heads, window, mask.map(|m| m.len()))?;
    let (n, dh) = (l.tokens, l.head_dim);
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let rel = relative_index(window);
    let bias_side = bias_shape[1];

    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); q.len()];
    let mut dv = vec![T::zero(); q.len()];
    let mut dbias = vec![T::zero(); heads * bias_side];
    let mut pos = Vec::with_capacity(n);
    let buf = || vec![T::zero(); n * dh];
    let (mut qt, mut kt, mut vt, mut gt) = (buf(), buf(), buf(), buf());
    let (mut dqt, mut dkt, mut dvt) = (buf(), buf(), buf());
    let mut ds = vec![T::zero(); n * n];
    for b in 0..l.batch {
        for win in 0..l.windows_per_image {
            l.positions(win, &mut pos);
            for h in 0..heads {
                gather(&l, q.data(), b, h, &pos, &mut qt);
                gather(&l, k.data(), b, h, &pos, &mut kt);
                gather(&l, v.data(), b, h, &pos, &mut vt);
                gather(&l, g.data(), b, h, &pos, &mut gt);
                let base = ((b * l.windows_per_image + win) * heads + h) * n * n;
                let a = &probs[base..base + n * n];

                // dV = Aᵀ·dO
                dvt.iter_mut().for_each(|x| *x = T::zero());
                for i in 0..n {
                    let gi = &gt[i * dh..(i + 1) * dh];
                    for j in 0..n {
                        let aij = a[i * n + j];
                        for (d, &gv) in dvt[j * dh..(j + 1) * dh].iter_mut().zip(gi) {
                            *d += aij * gv;
                        }
                    }
                }
                // dS = A ⊙ (dA − rowsum(A ⊙ dA)),  dA = dO·Vᵀ
                for i in 0..n {
                    let gi = &gt[i * dh..(i + 1) * dh];
                    let mut acc = T::zero();
                    for j in 0..n {
                        let da = dot(gi, &vt[j * dh..(j + 1) * dh]);
                        ds[i * n + j] = da;
                        acc += da * a[i * n + j];
                    }
                    for j in 0..n {
                        ds[i * n + j] = a[i * n + j] * (ds[i * n + j] - acc);
                    }
                }
                let dbt = &mut dbias[h * bias_side..(h + 1) * bias_side];
                for (r, &d) in rel.iter().zip(ds.iter()) {
                    dbt[*r] += d;
                }
                // dQ = scale·dS·K,  dK = scale·dSᵀ·Q
                dqt.iter_mut().for_each(|x| *x = T::zero());
                dkt.iter_mut().for_each(|x| *x = T::zero());
                for i in 0..n {
                    for j in 0..n {
                        let s = ds[i * n + j] * scale;
                        let (kj, qi) = (&kt[j * dh..(j + 1) * dh], &qt[i * dh..(i + 1) * dh]);
                        for (d, &kv) in dqt[i * dh..(i + 1) * dh].iter_mut().zip(kj) {
                            *d += s * kv;
                        }
                        for (d, &qv) in dkt[j * dh..(j + 1) * dh].iter_mut().zip(qi) {
                            *d += s * qv;
                        }
                    }
                }
                scatter_add(&l, &mut dq, b, h, &pos, &dqt);
                scatter_add(&l, &mut dk, b, h, &pos, &dkt);
                scatter_add(&l, &mut dv, b, h, &pos, &dvt);
            }
        }
    }
    let shape = q.shape().to_vec();
    Ok(vec![
        (vars[0], Tensor::new(shape.clone(), dq)?),
        (vars[1], Tensor::new(shape.clone(), dk)?),
        (vars[2], Tensor::new(shape, dv)?),
        (bias_var, Tensor::new(bias_shape.to_vec(), dbias)?),
    ])
}

impl<T: Float> Graph<T> {
    /// Windowed multi-head attention over projected `q`, `k`, `v` maps
    /// `(B, C, H, W)`. `bias` is the `(heads, (2M−1)²)` relative-position
    /// table; `mask`, if given, holds one additive `M²×M²` block per window.
    pub fn window_attention_core(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        window: usize,
        mask: Option<Arc<Vec<T>>>,
    ) -> Result<Var> {
        let f = forward(
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(bias),
            heads,
            window,
            mask.as_deref().map(|m| m.as_slice()),
        )?;
        Ok(self.record(
            f.out,
            Op::WindowAttention {
                q,
                k,
                v,
                bias,
                heads,
                window,
                mask,
                probs: f.probs,
            },
            &[q, k, v, bias],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_index_covers_table() {
        let m = 3;
        let idx = relative_index(m);
        assert_eq!(idx.len(), 81);
        // diagonal is the zero offset, centre of the table
        for i in 0..9 {
            assert_eq!(idx[i * 9 + i], 2 * 5 + 2);
        }
        assert_eq!(*idx.iter().max().unwrap(), 24);
        assert_eq!(*idx.iter().min().unwrap(), 0);
    }

    #[test]
    fn single_token_window_copies_values() {
        let q = Tensor::from_fn(vec![1, 2, 3, 3], |i| i as f64 * 0.1);
        let v = Tensor::from_fn(vec![1, 2, 3, 3], |i| (i as f64).sin());
        let bias = Tensor::zeros(vec![1, 1]);
        let f = forward(&q, &q, &v, &bias, 1, 1, None).unwrap();
        assert_eq!(f.out, v);
        assert!(f.probs.iter().all(|&p| p == 1.0));
    }
}
