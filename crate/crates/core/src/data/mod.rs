//! Exposure stacks, network input assembly, patch extraction, augmentation,
//! synthetic scenes and image/manifest IO.
//!
//! Images are `(1, 3, H, W)` `f32` tensors with values in `[0, 1]` for LDR
//! frames and ground truth.

pub mod io;
pub mod manifest;
pub mod synth;

use crate::error::{Error, Result};
use crate::ops::{concat_channels, crop};
use crate::tensor::{Float, Tensor};

pub use manifest::{load_dataset, Manifest};
pub use synth::{render_scene, synth_scene, SynthScene};

/// Camera response exponent used to linearize LDR frames.
pub const DEFAULT_GAMMA: f64 = 2.2;

/// Three LDR frames of one scene with their exposure times.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureStack {
    pub images: [Tensor<f32>; 3],
    /// Strictly increasing; the middle frame is the reference.
    pub times: [f64; 3],
    pub gamma: f64,
}

impl ExposureStack {
    pub fn new(images: [Tensor<f32>; 3], times: [f64; 3], gamma: f64) -> Result<Self> {
        for img in &images {
            let [b, c, _, _] = img.dims4()?;
            if b != 1 || c != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "exposure frames must be (1, 3, H, W), got {:?}",
                    img.shape()
                )));
            }
            img.expect_same_shape(&images[0])?;
        }
        if !(times[0] > 0.0 && times[0] < times[1] && times[1] < times[2]) {
            return Err(Error::InvalidArgument(format!(
                "exposure times {times:?} must be positive and strictly increasing"
            )));
        }
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} must be positive")));
        }
        Ok(ExposureStack { images, times, gamma })
    }

    /// `(height, width)`
    pub fn size(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[2], s[3])
    }
}

/// An exposure stack and its ground-truth HDR image, aligned to the middle
/// frame and scaled into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stack: ExposureStack,
    pub gt: Tensor<f32>,
}

impl Sample {
    pub fn new(stack: ExposureStack, gt: Tensor<f32>) -> Result<Self> {
        gt.expect_same_shape(&stack.images[0])?;
        Ok(Sample { stack, gt })
    }

    fn map(&self, f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Sample> {
        let [a, b, c] = &self.stack.images;
        Ok(Sample {
            stack: ExposureStack {
                images: [f(a)?, f(b)?, f(c)?],
                times: self.stack.times,
                gamma: self.stack.gamma,
            },
            gt: f(&self.gt)?,
        })
    }
}

/// Linearizes an LDR frame into radiance: `H = I^γ / t`.
pub fn gamma_normalize<T: Float>(image: &Tensor<T>, time: f64, gamma: f64) -> Result<Tensor<T>> {
    if !(time > 0.0) {
        return Err(Error::InvalidArgument(format!("exposure time {time} must be positive")));
    }
    let (g, inv_t) = (T::lit(gamma), T::lit(1.0 / time));
    Ok(image.map(|v| v.max(T::zero()).powf(g) * inv_t))
}

/// Network inputs: `X = [H₁, I₁, H₂, I₂, H₃, I₃]` (18 channels) and the
/// reference pair `X₂ = [H₂, I₂]` (6 channels).
pub fn build_input(stack: &ExposureStack) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut parts = Vec::with_capacity(3);
    for (img, &t) in stack.images.iter().zip(&stack.times) {
        let h = gamma_normalize(img, t, stack.gamma)?;
        parts.push(concat_channels(&[&h, img])?);
    }
    let x = concat_channels(&[&parts[0], &parts[1], &parts[2]])?;
    Ok((x, parts.swap_remove(1)))
}

/// Batched `(X, X₂, GT)` for a list of equally sized samples.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let mut xs = Vec::with_capacity(samples.len());
    let mut x2s = Vec::with_capacity(samples.len());
    for s in samples {
        let (x, x2) = build_input(&s.stack)?;
        xs.push(x);
        x2s.push(x2);
    }
    let gts: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.gt).collect();
    Ok((
        Tensor::stack_batch(&xs.iter().collect::<Vec<_>>())?,
        Tensor::stack_batch(&x2s.iter().collect::<Vec<_>>())?,
        Tensor::stack_batch(&gts)?,
    ))
}

/// Number of patch positions along an axis of length `n`.
pub fn patch_positions(n: usize, size: usize, stride: usize) -> usize {
    if n < size || stride == 0 {
        0
    } else {
        (n - size) / stride + 1
    }
}

/// Crops `size × size` patches on a `stride` grid starting at the top-left
/// corner; the same crop is applied to every frame and the ground truth.
pub fn extract_patches(sample: &Sample, size: usize, stride: usize) -> Result<Vec<Sample>> {
    let (h, w) = sample.stack.size();
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if h < size || w < size {
        return Err(Error::ShapeMismatch(format!("image {h}×{w} smaller than patch {size}")));
    }
    let (ny, nx) = (patch_positions(h, size, stride), patch_positions(w, size, stride));
    let mut out = Vec::with_capacity(ny * nx);
    for py in 0..ny {
        for px in 0..nx {
            out.push(sample.map(|t| crop(t, py * stride, px * stride, size, size))?);
        }
    }
    Ok(out)
}

/// One of the eight rotations/reflections of the square: `code & 3` quarter
/// turns counter-clockwise, then a horizontal flip if `code & 4`.
pub fn dihedral<T: Float>(x: &Tensor<T>, code: u8) -> Result<Tensor<T>> {
    if code > 7 {
        return Err(Error::InvalidArgument(format!("augmentation code {code} outside 0..=7")));
    }
    let [b, c, h, w] = x.dims4()?;
    let turns = code & 3;
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let flip = code & 4 != 0;
    let xd = x.data();
    let mut out = Vec::with_capacity(x.len());
    for p in 0..b * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let j = if flip { ow - 1 - j } else { j };
                // source pixel that lands on (i, j) after `turns` CCW rotations
                let (y, x) = match turns {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                out.push(src[y * w + x]);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// Applies [`dihedral`] with `code` to all frames and the ground truth.
pub fn augment(sample: &Sample, code: u8) -> Result<Sample> {
    sample.map(|t| dihedral(t, code))
}
