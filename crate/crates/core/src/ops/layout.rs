//! Pure data-movement ops: pixel (un)shuffle, cyclic roll, reflection pad,
//! crop, channel concat and window partitioning.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{reflect_index, Float, Tensor};

/// `(B, C, H, W) → (B, C·r², H/r, W/r)`; output channel `c·r² + dy·r + dx`
/// holds input pixel `(y·r + dy, x·r + dx)` of channel `c`.
pub fn pixel_unshuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Divisibility(format!(
            "pixel_unshuffle needs H, W divisible by {r}, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / r, w / r);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let mut idx = 0;
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..oh {
                        let row = ((bi * c + ci) * h + y * r + dy) * w;
                        for xx in 0..ow {
                            out[idx] = xd[row + xx * r + dx];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c * r * r, oh, ow], out)
}

/// Inverse of [`pixel_unshuffle`]: `(B, C·r², H, W) → (B, C, H·r, W·r)`.
pub fn pixel_shuffle<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [b, cr, h, w] = x.dims4()?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::Divisibility(format!(
            "pixel_shuffle needs C divisible by {}, got {cr}",
            r * r
        )));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let mut idx = 0;
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for y in 0..h {
                        let row = ((bi * c + ci) * oh + y * r + dy) * ow;
                        for xx in 0..w {
                            out[row + xx * r + dx] = xd[idx];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// Cyclic shift: element `(i, j)` moves to `((i + shift_h) mod H, (j + shift_w) mod W)`.
pub fn roll<T: Float>(x: &Tensor<T>, shift_h: isize, shift_w: isize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let sh = shift_h.rem_euclid(h as isize) as usize;
    let sw = shift_w.rem_euclid(w as isize) as usize;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let di = (i + sh) % h;
            let srow = &src[i * w..(i + 1) * w];
            let drow = &mut dst[di * w..(di + 1) * w];
            drow[sw..].copy_from_slice(&srow[..w - sw]);
            drow[..sw].copy_from_slice(&srow[w - sw..]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Reflection padding by `[top, bottom, left, right]`; pads may exceed the
/// image size (reflection repeats).
pub fn reflect_pad<T: Float>(x: &Tensor<T>, pad: [usize; 4]) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let [top, bottom, left, right] = pad;
    let (oh, ow) = (h + top + bottom, w + left + right);
    let xd = x.data();
    let cols: Vec<usize> = (0..ow).map(|j| reflect_index(j as isize - left as isize, w)).collect();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let row = &src[reflect_index(i as isize - top as isize, h) * w..][..w];
            out.extend(cols.iter().map(|&j| row[j]));
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

pub(crate) fn reflect_pad_backward<T: Float>(
    g: &Tensor<T>,
    src_shape: &[usize],
    pad: [usize; 4],
) -> Result<Tensor<T>> {
    let [b, c, h, w] = [src_shape[0], src_shape[1], src_shape[2], src_shape[3]];
    let [top, _, left, _] = pad;
    let [_, _, oh, ow] = g.dims4()?;
    let gd = g.data();
    let mut out = vec![T::zero(); b * c * h * w];
    let cols: Vec<usize> = (0..ow).map(|j| reflect_index(j as isize - left as isize, w)).collect();
    for p in 0..b * c {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let si = reflect_index(i as isize - top as isize, h);
            let grow = &gd[(p * oh + i) * ow..(p * oh + i + 1) * ow];
            for (j, &gv) in grow.iter().enumerate() {
                dst[si * w + cols[j]] += gv;
            }
        }
    }
    Tensor::new(src_shape.to_vec(), out)
}

pub fn crop<T: Float>(x: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if top + height > h || left + width > w {
        return Err(Error::ShapeMismatch(format!(
            "crop {height}×{width} at ({top},{left}) exceeds {h}×{w}"
        )));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * height * width);
    for p in 0..b * c {
        for i in 0..height {
            let start = (p * h + top + i) * w + left;
            out.extend_from_slice(&xd[start..start + width]);
        }
    }
    Tensor::new(vec![b, c, height, width], out)
}

pub(crate) fn crop_backward<T: Float>(
    g: &Tensor<T>,
    src_shape: &[usize],
    top: usize,
    left: usize,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = [src_shape[0], src_shape[1], src_shape[2], src_shape[3]];
    let [_, _, height, width] = g.dims4()?;
    let mut out = vec![T::zero(); b * c * h * w];
    let gd = g.data();
    for p in 0..b * c {
        for i in 0..height {
            let start = (p * h + top + i) * w + left;
            out[start..start + width].copy_from_slice(&gd[(p * height + i) * width..][..width]);
        }
    }
    Tensor::new(src_shape.to_vec(), out)
}

pub fn concat_channels<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let [b, _, h, w] = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let [pb, pc, ph, pw] = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "concat {:?} with {:?}",
                p.shape(),
                first.shape()
            )));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(b * total_c * hw);
    for bi in 0..b {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[bi * pc * hw..(bi + 1) * pc * hw]);
        }
    }
    Tensor::new(vec![b, total_c, h, w], out)
}

pub fn split_channels<T: Float>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [b, c, h, w] = x.dims4()?;
    if sizes.iter().sum::<usize>() != c {
        return Err(Error::ChannelMismatch {
            expected: c,
            got: sizes.iter().sum(),
        });
    }
    let hw = h * w;
    let xd = x.data();
    let mut outs: Vec<Vec<T>> = sizes.iter().map(|s| Vec::with_capacity(b * s * hw)).collect();
    for bi in 0..b {
        let mut off = 0;
        for (o, &s) in outs.iter_mut().zip(sizes) {
            o.extend_from_slice(&xd[(bi * c + off) * hw..(bi * c + off + s) * hw]);
            off += s;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::new(vec![b, s, h, w], d))
        .collect()
}

/// `(B, C, H, W) → (B·nW, M², C)` with windows in row-major order per image
/// and tokens in row-major order per window.
pub fn window_partition<T: Float>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::Divisibility(format!(
            "window {window} must divide {h}×{w}"
        )));
    }
    let (nh, nw) = (h / window, w / window);
    let m2 = window * window;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                let row = &xd[((bi * c + ci) * h + y) * w..][..w];
                let (wy, ty) = (y / window, y % window);
                for (xx, &v) in row.iter().enumerate() {
                    let (wx, tx) = (xx / window, xx % window);
                    let win = (bi * nh + wy) * nw + wx;
                    out[(win * m2 + ty * window + tx) * c + ci] = v;
                }
            }
        }
    }
    Tensor::new(vec![b * nh * nw, m2, c], out)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Float>(t: &Tensor<T>, window: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let (nwin, m2, c) = match t.shape() {
        &[a, b, c] => (a, b, c),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "window_reverse expects (B·nW, M², C), got {s:?}"
            )))
        }
    };
    if window == 0 || m2 != window * window || height % window != 0 || width % window != 0 {
        return Err(Error::Divisibility(format!(
            "window {window} incompatible with tokens {m2} and image {height}×{width}"
        )));
    }
    let (nh, nw) = (height / window, width / window);
    if nwin % (nh * nw) != 0 {
        return Err(Error::Divisibility(format!(
            "{nwin} windows do not tile {height}×{width} images"
        )));
    }
    let b = nwin / (nh * nw);
    let td = t.data();
    let mut out = vec![T::zero(); td.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..height {
                let (wy, ty) = (y / window, y % window);
                for xx in 0..width {
                    let (wx, tx) = (xx / window, xx % window);
                    let win = (bi * nh + wy) * nw + wx;
                    out[((bi * c + ci) * height + y) * width + xx] = td[(win * m2 + ty * window + tx) * c + ci];
                }
            }
        }
    }
    Tensor::new(vec![b, c, height, width], out)
}

impl<T: Float> Graph<T> {
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), r)?;
        Ok(self.record(out, Op::PixelShuffle { x, r }, &[x]))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_unshuffle(self.value(x), r)?;
        Ok(self.record(out, Op::PixelUnshuffle { x, r }, &[x]))
    }

    pub fn roll(&mut self, x: Var, shift_h: isize, shift_w: isize) -> Result<Var> {
        let out = roll(self.value(x), shift_h, shift_w)?;
        Ok(self.record(out, Op::Roll { x, shift_h, shift_w }, &[x]))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: [usize; 4]) -> Result<Var> {
        let out = reflect_pad(self.value(x), pad)?;
        Ok(self.record(out, Op::ReflectPad { x, pad }, &[x]))
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let out = crop(self.value(x), top, left, height, width)?;
        Ok(self.record(out, Op::Crop { x, top, left }, &[x]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = concat_channels(&vals)?;
        Ok(self.record(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn window_partition(&mut self, x: Var, window: usize) -> Result<Var> {
        let out = window_partition(self.value(x), window)?;
        Ok(self.record(out, Op::WindowPartition { x, window }, &[x]))
    }

    pub fn window_reverse(&mut self, x: Var, window: usize, height: usize, width: usize) -> Result<Var> {
        let out = window_reverse(self.value(x), window, height, width)?;
        Ok(self.record(out, Op::WindowReverse { x, window }, &[x]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn unshuffle_two_by_two_channel_order() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 1, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unshuffle_index_formula_by_enumeration() {
        let (b, c, h, w, r) = (2, 3, 4, 6, 2);
        let x = iota(vec![b, c, h, w]);
        let y = pixel_unshuffle(&x, r).unwrap();
        for bi in 0..b {
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        let oc = ci * r * r + (yy % r) * r + xx % r;
                        assert_eq!(y.at4(bi, oc, yy / r, xx / r), x.at4(bi, ci, yy, xx));
                    }
                }
            }
        }
    }

    #[test]
    fn shuffle_shapes_and_inverse() {
        let x = iota(vec![2, 3, 16, 16]);
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 12, 8, 8]);
        assert_eq!(pixel_shuffle(&y, 2).unwrap(), x);
        assert!(pixel_unshuffle(&iota(vec![1, 1, 3, 4]), 2).is_err());
        assert!(pixel_shuffle(&iota(vec![1, 3, 2, 2]), 2).is_err());
    }

    #[test]
    fn roll_row() {
        let x = Tensor::new(vec![1, 1, 1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(roll(&x, 0, -1).unwrap().data(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(roll(&x, 0, 0).unwrap(), x);
        let img = iota(vec![1, 2, 3, 5]);
        assert_eq!(roll(&img, 3, 5).unwrap(), img);
        assert_eq!(roll(&roll(&img, 2, -4).unwrap(), -2, 4).unwrap(), img);
    }

    #[test]
    fn reflect_pad_and_crop_round_trip() {
        let x = iota(vec![1, 2, 3, 4]);
        let p = reflect_pad(&x, [1, 5, 2, 0]).unwrap();
        assert_eq!(p.shape(), &[1, 2, 9, 6]);
        assert_eq!(p.at4(0, 0, 0, 0), x.at4(0, 0, 1, 2));
        assert_eq!(crop(&p, 1, 2, 3, 4).unwrap(), x);
    }

    #[test]
    fn partition_counts_and_inverse() {
        let x = iota(vec![1, 3, 16, 16]);
        let t = window_partition(&x, 8).unwrap();
        assert_eq!(t.shape(), &[4, 64, 3]);
        assert_eq!(window_reverse(&t, 8, 16, 16).unwrap(), x);
    }

    #[test]
    fn single_window_is_row_major() {
        let x = iota(vec![1, 2, 4, 4]);
        let t = window_partition(&x, 4).unwrap();
        assert_eq!(t.shape(), &[1, 16, 2]);
        for tok in 0..16 {
            assert_eq!(t.data()[tok * 2], tok as f64);
            assert_eq!(t.data()[tok * 2 + 1], 16.0 + tok as f64);
        }
        assert!(window_partition(&x, 3).is_err());
    }

    #[test]
    fn concat_split_inverse() {
        let a = iota(vec![2, 1, 2, 2]);
        let b = iota(vec![2, 3, 2, 2]).map(|v| -v);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 2]);
        let parts = split_channels(&c, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
