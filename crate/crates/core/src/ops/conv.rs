//! Stride-1 "same" convolutions: 1×1 pointwise, 3×3 depthwise and dense 3×3,
//! the latter two with reflection padding.

use crate::error::{Error, Result};
use crate::graph::{ConvKind, Graph, Op, Var};
use crate::tensor::{axpy, dot, lane_sum, reflect_index, Float, Tensor};

struct Dims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

fn check<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, kind: ConvKind) -> Result<Dims> {
    let [batch, cin, h, wd] = x.dims4()?;
    let [cout, wi, kh, kw] = w.dims4()?;
    let (want_in, want_k) = match kind {
        ConvKind::Pointwise => (cin, 1),
        ConvKind::Depthwise3x3 => (1, 3),
        ConvKind::Full3x3 => (cin, 3),
    };
    if kh != want_k || kw != want_k {
        return Err(Error::ShapeMismatch(format!(
            "{kind:?} kernel must be {want_k}×{want_k}, got weight {:?}",
            w.shape()
        )));
    }
    if wi != want_in {
        return Err(Error::ChannelMismatch {
            expected: want_in,
            got: wi,
        });
    }
    if kind == ConvKind::Depthwise3x3 && cout != cin {
        return Err(Error::ChannelMismatch {
            expected: cin,
            got: cout,
        });
    }
    if b.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} does not match {cout} output channels",
            b.shape()
        )));
    }
    Ok(Dims {
        batch,
        cin,
        cout,
        h,
        w: wd,
    })
}

/// Reflect-pads every `h×w` plane of `src` by one pixel on each side.
fn pad1<T: Float>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![T::zero(); planes * ph * pw];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * ph * pw..(p + 1) * ph * pw];
        for py in 0..ph {
            let sy = reflect_index(py as isize - 1, h);
            let srow = &s[sy * w..(sy + 1) * w];
            let drow = &mut d[py * pw..(py + 1) * pw];
            drow[1..=w].copy_from_slice(srow);
            drow[0] = srow[reflect_index(-1, w)];
            drow[w + 1] = srow[reflect_index(w as isize, w)];
        }
    }
    out
}

/// Adjoint of [`pad1`]: folds padded-plane gradients back onto the source.
fn unpad1_add<T: Float>(dpad: &[T], planes: usize, h: usize, w: usize, dst: &mut [T]) {
    let (ph, pw) = (h + 2, w + 2);
    for p in 0..planes {
        let s = &dpad[p * ph * pw..(p + 1) * ph * pw];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for py in 0..ph {
            let sy = reflect_index(py as isize - 1, h);
            let srow = &s[py * pw..(py + 1) * pw];
            let drow = &mut d[sy * w..(sy + 1) * w];
            for (a, &b) in drow.iter_mut().zip(&srow[1..=w]) {
                *a += b;
            }
            drow[reflect_index(-1, w)] += srow[0];
            drow[reflect_index(w as isize, w)] += srow[w + 1];
        }
    }
}

/// `out_row[x] += k0·src[x] + k1·src[x+1] + k2·src[x+2]`
#[inline]
fn tap3<T: Float>(out_row: &mut [T], src: &[T], k: [T; 3]) {
    let w = out_row.len();
    let (s0, s1, s2) = (&src[..w], &src[1..w + 1], &src[2..w + 2]);
    for (((o, &a), &b), &c) in out_row.iter_mut().zip(s0).zip(s1).zip(s2) {
        *o += k[0] * a + k[1] * b + k[2] * c;
    }
}

/// Adjoint of [`tap3`]: scatters `g_row` into three shifted source slices.
#[inline]
fn tap3_adjoint<T: Float>(dsrc: &mut [T], g_row: &[T], k: [T; 3]) {
    let w = g_row.len();
    axpy(&mut dsrc[..w], k[0], g_row);
    axpy(&mut dsrc[1..w + 1], k[1], g_row);
    axpy(&mut dsrc[2..w + 2], k[2], g_row);
}

pub fn conv2d<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    kind: ConvKind,
) -> Result<Tensor<T>> {
    let d = check(x, w, b, kind)?;
    let hw = d.h * d.w;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); d.batch * d.cout * hw];
    match kind {
        ConvKind::Pointwise => {
            for bi in 0..d.batch {
                let xb = &xd[bi * d.cin * hw..(bi + 1) * d.cin * hw];
                for o in 0..d.cout {
                    let orow = &mut out[(bi * d.cout + o) * hw..(bi * d.cout + o + 1) * hw];
                    orow.fill(bd[o]);
                    for i in 0..d.cin {
                        axpy(orow, wd[o * d.cin + i], &xb[i * hw..(i + 1) * hw]);
                    }
                }
            }
        }
        ConvKind::Depthwise3x3 | ConvKind::Full3x3 => {
            let pw = d.w + 2;
            let pplane = (d.h + 2) * pw;
            let depthwise = kind == ConvKind::Depthwise3x3;
            for bi in 0..d.batch {
                let padded = pad1(&xd[bi * d.cin * hw..(bi + 1) * d.cin * hw], d.cin, d.h, d.w);
                for o in 0..d.cout {
                    let oplane = &mut out[(bi * d.cout + o) * hw..(bi * d.cout + o + 1) * hw];
                    oplane.fill(bd[o]);
                    let inputs = if depthwise { o..o + 1 } else { 0..d.cin };
                    for i in inputs {
                        let wi = if depthwise { 0 } else { i };
                        let kbase = ((o * (if depthwise { 1 } else { d.cin }) + wi) * 3) * 3;
                        let src = &padded[i * pplane..(i + 1) * pplane];
                        for ky in 0..3 {
                            let k = [wd[kbase + ky * 3], wd[kbase + ky * 3 + 1], wd[kbase + ky * 3 + 2]];
                            for y in 0..d.h {
                                tap3(
                                    &mut oplane[y * d.w..(y + 1) * d.w],
                                    &src[(y + ky) * pw..(y + ky + 1) * pw],
                                    k,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.batch, d.cout, d.h, d.w], out)
}

pub(crate) fn backward<T: Float>(
    g: &Tensor<T>,
    (vx, x, need_x): (Var, &Tensor<T>, bool),
    (vw, w, need_w): (Var, &Tensor<T>, bool),
    (vb, need_b): (Var, bool),
    kind: ConvKind,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let [batch, cin, h, wdt] = x.dims4()?;
    let cout = w.shape()[0];
    let hw = h * wdt;
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut out = Vec::new();

    if need_b {
        let mut db = vec![T::zero(); cout];
        for (o, slot) in db.iter_mut().enumerate() {
            for bi in 0..batch {
                *slot += lane_sum(&gd[(bi * cout + o) * hw..(bi * cout + o + 1) * hw]);
            }
        }
        out.push((vb, Tensor::new(vec![cout], db)?));
    }

    match kind {
        ConvKind::Pointwise => {
            if need_w {
                let mut dw = vec![T::zero(); cout * cin];
                for o in 0..cout {
                    for i in 0..cin {
                        let mut acc = T::zero();
                        for bi in 0..batch {
                            acc += dot(
                                &gd[(bi * cout + o) * hw..(bi * cout + o + 1) * hw],
                                &xd[(bi * cin + i) * hw..(bi * cin + i + 1) * hw],
                            );
                        }
                        dw[o * cin + i] = acc;
                    }
                }
                out.push((vw, Tensor::new(w.shape().to_vec(), dw)?));
            }
            if need_x {
                let mut dx = vec![T::zero(); batch * cin * hw];
                for bi in 0..batch {
                    for i in 0..cin {
                        let drow = &mut dx[(bi * cin + i) * hw..(bi * cin + i + 1) * hw];
                        for o in 0..cout {
                            axpy(drow, wd[o * cin + i], &gd[(bi * cout + o) * hw..(bi * cout + o + 1) * hw]);
                        }
                    }
                }
                out.push((vx, Tensor::new(x.shape().to_vec(), dx)?));
            }
        }
        ConvKind::Depthwise3x3 | ConvKind::Full3x3 => {
            let depthwise = kind == ConvKind::Depthwise3x3;
            let wcin = if depthwise { 1 } else { cin };
            let pw = wdt + 2;
            let pplane = (h + 2) * pw;
            let mut dw = vec![T::zero(); w.len()];
            let mut dx = vec![T::zero(); if need_x { x.len() } else { 0 }];
            for bi in 0..batch {
                let xb = &xd[bi * cin * hw..(bi + 1) * cin * hw];
                let padded = if need_w { pad1(xb, cin, h, wdt) } else { Vec::new() };
                let mut dpad = vec![T::zero(); if need_x { cin * pplane } else { 0 }];
                for o in 0..cout {
                    let gplane = &gd[(bi * cout + o) * hw..(bi * cout + o + 1) * hw];
                    let inputs = if depthwise { o..o + 1 } else { 0..cin };
                    for i in inputs {
                        let kbase = (o * wcin + if depthwise { 0 } else { i }) * 9;
                        for ky in 0..3 {
                            if need_w {
                                let src = &padded[i * pplane..(i + 1) * pplane];
                                for kx in 0..3 {
                                    let mut acc = T::zero();
                                    for y in 0..h {
                                        let s = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + wdt];
                                        acc += dot(&gplane[y * wdt..(y + 1) * wdt], s);
                                    }
                                    dw[kbase + ky * 3 + kx] += acc;
                                }
                            }
                            if need_x {
                                let k = [wd[kbase + ky * 3], wd[kbase + ky * 3 + 1], wd[kbase + ky * 3 + 2]];
                                let dsrc = &mut dpad[i * pplane..(i + 1) * pplane];
                                for y in 0..h {
                                    tap3_adjoint(
                                        &mut dsrc[(y + ky) * pw..(y + ky + 1) * pw],
                                        &gplane[y * wdt..(y + 1) * wdt],
                                        k,
                                    );
                                }
                            }
                        }
                    }
                }
                if need_x {
                    unpad1_add(&dpad, cin, h, wdt, &mut dx[bi * cin * hw..(bi + 1) * cin * hw]);
                }
            }
            if need_w {
                out.push((vw, Tensor::new(w.shape().to_vec(), dw)?));
            }
            if need_x {
                out.push((vx, Tensor::new(x.shape().to_vec(), dx)?));
            }
        }
    }
    Ok(out)
}

impl<T: Float> Graph<T> {
    /// Stride-1 convolution keeping the spatial size. `w` is `(O, I, k, k)`
    /// (`(C, 1, 3, 3)` for depthwise) and `b` is `(O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kind: ConvKind) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(w), self.value(b), kind)?;
        Ok(self.record(out, Op::Conv2d { x, w, b, kind }, &[x, w, b]))
    }
}
