//! Binary PPM (P6), PFM and Radiance RGBE image files.
//!
//! Every reader returns a `(1, 3, H, W)` tensor with rows top to bottom.
//! PPM samples are normalized by the file's maxval; PFM and RGBE hold linear
//! floats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Whitespace-separated header tokens with `#` comments skipped.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Header { bytes, pos: 0 }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::MalformedHeader(format!("missing {what}"))),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::MalformedHeader(format!("non-ASCII {what}")))
    }

    fn number<N: std::str::FromStr>(&mut self, what: &str) -> Result<N> {
        let t = self.token(what)?;
        t.parse()
            .map_err(|_| Error::MalformedHeader(format!("{what} `{t}` is not a number")))
    }

    /// Consumes the single whitespace byte that ends the header.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::TruncatedPayload("header ends without pixel data".into())),
        }
    }
}

/// Decodes a binary `P6` pixmap (maxval 1..=65535, 16-bit samples big-endian).
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut hdr = Header::new(bytes);
    match hdr.token("magic")? {
        "P6" => {}
        m @ ("P1" | "P2" | "P3" | "P4" | "P5" | "P7") => {
            return Err(Error::Unsupported(format!("netpbm variant {m}; only binary P6 is read")))
        }
        m => return Err(Error::MalformedHeader(format!("bad magic `{m}`"))),
    }
    let w: usize = hdr.number("width")?;
    let h: usize = hdr.number("height")?;
    let maxval: u32 = hdr.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::MalformedHeader(format!("empty image {w}×{h}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} outside 1..=65535")));
    }
    let start = hdr.end()?;
    let bps = if maxval > 255 { 2 } else { 1 };
    let need = w * h * 3 * bps;
    let payload = &bytes[start..];
    if payload.len() < need {
        return Err(Error::TruncatedPayload(format!(
            "PPM needs {need} bytes of pixels, found {}",
            payload.len()
        )));
    }
    let maxval_f = maxval as f32;
    let mut out = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let k = i * 3 + c;
            let v = if bps == 2 {
                u16::from_be_bytes([payload[2 * k], payload[2 * k + 1]]) as u32
            } else {
                payload[k] as u32
            };
            out[c * h * w + i] = v.min(maxval) as f32 / maxval_f;
        }
    }
    Tensor::new(vec![1, 3, h, w], out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_ppm(&read_file(path)?)
}

fn image_dims(img: &Tensor<f32>) -> Result<(usize, usize)> {
    let [b, c, h, w] = img.dims4()?;
    if b != 1 || c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected a (1, 3, H, W) image, got {:?}",
            img.shape()
        )));
    }
    Ok((h, w))
}

/// Encodes a `P6` pixmap with maxval 255 (`bits = 8`) or 65535 (`bits = 16`).
/// Values are clamped to `[0, 1]` and rounded.
pub fn encode_ppm(img: &Tensor<f32>, bits: u8) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img)?;
    let maxval: u32 = match bits {
        8 => 255,
        16 => 65535,
        _ => return Err(Error::Unsupported(format!("{bits}-bit PPM"))),
    };
    let mut out = format!("P6\n{w} {h}\n{maxval}\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            let v = d[c * h * w + i];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            let q = (v * maxval as f32).round() as u32;
            if bits == 16 {
                out.extend_from_slice(&(q as u16).to_be_bytes());
            } else {
                out.push(q as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f32>, bits: u8) -> Result<()> {
    write_file(path.as_ref(), &encode_ppm(img, bits)?)
}

/// Decodes a colour `PF` float map. A negative scale means little-endian;
/// rows are stored bottom to top.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut hdr = Header::new(bytes);
    match hdr.token("magic")? {
        "PF" => {}
        "Pf" => return Err(Error::Unsupported("greyscale PFM".into())),
        m => return Err(Error::MalformedHeader(format!("bad magic `{m}`"))),
    }
    let w: usize = hdr.number("width")?;
    let h: usize = hdr.number("height")?;
    let scale: f32 = hdr.number("scale")?;
    if w == 0 || h == 0 {
        return Err(Error::MalformedHeader(format!("empty image {w}×{h}")));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::MalformedHeader(format!("scale {scale}")));
    }
    let little = scale < 0.0;
    let start = hdr.end()?;
    let payload = &bytes[start..];
    let need = w * h * 3 * 4;
    if payload.len() < need {
        return Err(Error::TruncatedPayload(format!(
            "PFM needs {need} bytes of pixels, found {}",
            payload.len()
        )));
    }
    let mut out = vec![0.0f32; 3 * h * w];
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            for c in 0..3 {
                let k = ((row * w + x) * 3 + c) * 4;
                let b = [payload[k], payload[k + 1], payload[k + 2], payload[k + 3]];
                out[(c * h + y) * w + x] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            }
        }
    }
    Tensor::new(vec![1, 3, h, w], out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_pfm(&read_file(path)?)
}

/// Encodes a little-endian colour PFM (scale `-1.0`).
pub fn encode_pfm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = image_dims(img)?;
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 12);
    let d = img.data();
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            for c in 0..3 {
                out.extend_from_slice(&d[(c * h + y) * w + x].to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &Tensor<f32>) -> Result<()> {
    write_file(path.as_ref(), &encode_pfm(img)?)
}

/// Shared-exponent decoding: `(m + 0.5)·2^(e − 136)`, zero when `e = 0`.
pub fn rgbe_to_float(rgbe: [u8; 4]) -> [f32; 3] {
    if rgbe[3] == 0 {
        return [0.0; 3];
    }
    let f = libm::ldexp(1.0, rgbe[3] as i32 - 136);
    [
        ((rgbe[0] as f64 + 0.5) * f) as f32,
        ((rgbe[1] as f64 + 0.5) * f) as f32,
        ((rgbe[2] as f64 + 0.5) * f) as f32,
    ]
}

fn rle_scanline(data: &[u8], pos: &mut usize, w: usize, line: &mut [[u8; 4]]) -> Result<()> {
    let trunc = || Error::TruncatedPayload("RGBE scanline ends early".into());
    for ch in 0..4 {
        let mut x = 0;
        while x < w {
            let &count = data.get(*pos).ok_or_else(trunc)?;
            *pos += 1;
            if count > 128 {
                let run = (count - 128) as usize;
                let &v = data.get(*pos).ok_or_else(trunc)?;
                *pos += 1;
                if x + run > w {
                    return Err(Error::MalformedHeader("RGBE run overflows scanline".into()));
                }
                for px in &mut line[x..x + run] {
                    px[ch] = v;
                }
                x += run;
            } else {
                let n = count as usize;
                if n == 0 || x + n > w {
                    return Err(Error::MalformedHeader("bad RGBE literal count".into()));
                }
                let src = data.get(*pos..*pos + n).ok_or_else(trunc)?;
                for (px, &v) in line[x..x + n].iter_mut().zip(src) {
                    px[ch] = v;
                }
                *pos += n;
                x += n;
            }
        }
    }
    Ok(())
}

/// Decodes a Radiance `.hdr` file with `-Y H +X W` orientation and either
/// run-length-encoded or flat scanlines.
pub fn decode_rgbe(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<&str> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("unterminated header line".into()))?;
        *pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::MalformedHeader("non-UTF-8 header".into()))
    };
    let magic = next_line(&mut pos)?;
    if !(magic.starts_with("#?RADIANCE") || magic.starts_with("#?RGBE")) {
        return Err(Error::MalformedHeader(format!("bad magic `{magic}`")));
    }
    loop {
        let line = next_line(&mut pos)?;
        if line.trim().is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            if fmt.trim() != "32-bit_rle_rgbe" {
                return Err(Error::Unsupported(format!("pixel format {fmt}")));
            }
        }
    }
    let res = next_line(&mut pos)?;
    let parts: Vec<&str> = res.split_whitespace().collect();
    let (h, w) = match parts.as_slice() {
        ["-Y", h, "+X", w] => (
            h.parse::<usize>()
                .map_err(|_| Error::MalformedHeader(format!("resolution `{res}`")))?,
            w.parse::<usize>()
                .map_err(|_| Error::MalformedHeader(format!("resolution `{res}`")))?,
        ),
        [_, _, _, _] => return Err(Error::Unsupported(format!("orientation `{res}`"))),
        _ => return Err(Error::MalformedHeader(format!("resolution `{res}`"))),
    };
    if h == 0 || w == 0 {
        return Err(Error::MalformedHeader(format!("empty image {w}×{h}")));
    }

    let mut out = vec![0.0f32; 3 * h * w];
    let mut line = vec![[0u8; 4]; w];
    for y in 0..h {
        let head = bytes.get(pos..pos + 4);
        let is_rle = (8..0x8000).contains(&w)
            && head.is_some_and(|b| b[0] == 2 && b[1] == 2 && b[2] & 0x80 == 0);
        if is_rle {
            let b = &bytes[pos..pos + 4];
            let declared = ((b[2] as usize) << 8) | b[3] as usize;
            if declared != w {
                return Err(Error::MalformedHeader(format!(
                    "scanline width {declared}, expected {w}"
                )));
            }
            pos += 4;
            rle_scanline(bytes, &mut pos, w, &mut line)?;
        } else {
            let raw = bytes
                .get(pos..pos + 4 * w)
                .ok_or_else(|| Error::TruncatedPayload(format!("RGBE scanline {y} ends early")))?;
            if raw[0..3] == [1, 1, 1] {
                return Err(Error::Unsupported("old-style run-length encoding".into()));
            }
            for (px, q) in line.iter_mut().zip(raw.chunks_exact(4)) {
                px.copy_from_slice(q);
            }
            pos += 4 * w;
        }
        for (x, px) in line.iter().enumerate() {
            let rgb = rgbe_to_float(*px);
            for c in 0..3 {
                out[(c * h + y) * w + x] = rgb[c];
            }
        }
    }
    Tensor::new(vec![1, 3, h, w], out)
}

pub fn read_rgbe(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_rgbe(&read_file(path)?)
}

/// Reads a float HDR image, choosing the decoder by extension (`.pfm` or
/// `.hdr`).
pub fn read_hdr_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "pfm" => read_pfm(path),
        Some(e) if e == "hdr" || e == "rgbe" => read_rgbe(path),
        _ => Err(Error::Unsupported(format!(
            "{}: HDR images must be .pfm or .hdr",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Tensor<f32> {
        Tensor::from_fn(vec![1, 3, 3, 5], |i| i as f32 / 44.0)
    }

    #[test]
    fn ppm_round_trip_8_and_16_bit() {
        let x = img();
        for bits in [8, 16] {
            let y = decode_ppm(&encode_ppm(&x, bits).unwrap()).unwrap();
            let tol = if bits == 8 { 0.5 / 255.0 } else { 0.5 / 65535.0 } + 1e-7;
            assert!(x.max_abs_diff(&y).unwrap() <= tol);
        }
    }

    #[test]
    fn ppm_normalization() {
        let mut bytes = b"P6\n# c\n1 1\n255\n".to_vec();
        bytes.extend([128, 0, 255]);
        let t = decode_ppm(&bytes).unwrap();
        assert_eq!(t.data(), &[128.0 / 255.0, 0.0, 1.0]);
    }

    #[test]
    fn ppm_errors_are_distinct() {
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(Error::Unsupported(_))));
        assert!(matches!(decode_ppm(b"Q6\n1 1\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0\0"), Err(Error::TruncatedPayload(_))));
    }

    #[test]
    fn pfm_round_trip_is_exact() {
        let x = img().map(|v| v * 1e3 - 7.25);
        assert_eq!(decode_pfm(&encode_pfm(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn big_endian_pfm() {
        let mut bytes = b"PF\n1 1\n1.0\n".to_vec();
        for v in [1.5f32, 2.0, -3.0] {
            bytes.extend(v.to_be_bytes());
        }
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[1.5, 2.0, -3.0]);
    }

    #[test]
    fn rgbe_flat_scanlines() {
        let mut bytes = b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y 1 +X 2\n".to_vec();
        bytes.extend([128, 128, 128, 129, 0, 0, 0, 0]);
        let t = decode_rgbe(&bytes).unwrap();
        assert!((t.data()[0] as f64 - 128.5 * 2f64.powi(129 - 136)).abs() < 1e-9);
        assert_eq!(t.data()[1], 0.0);
    }
}
