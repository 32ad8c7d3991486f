//! Deterministic synthetic exposure stacks with moving objects.
//!
//! A scene is a smooth, high dynamic range background plus a few
//! anti-aliased discs and boxes. Each shape moves by a per-shape velocity
//! between exposures; the middle exposure defines the ground truth. LDR
//! frames are the clipped, gamma-encoded, 8-bit quantized radiance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ExposureStack, Sample, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Radiance that maps to a ground-truth value of 1.
pub const RADIANCE_MAX: f64 = 4.0;
/// Exposure stops of the three frames relative to the reference.
pub const DEFAULT_STOPS: [f64; 3] = [-2.0, 0.0, 2.0];

const BACKGROUND_MIN: f64 = 0.01;
const BACKGROUND_MAX: f64 = 3.5;
/// Frames darker than this (before quantization) receive sensor noise.
const DARK_LEVEL: f64 = 0.04;
const DARK_NOISE: f64 = 0.008;

#[derive(Clone, Copy, Debug)]
enum Kind {
    Disc { r: f64 },
    Box { hw: f64, hh: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: Kind,
    center: (f64, f64),
    velocity: (f64, f64),
    radiance: [f64; 3],
}

impl Shape {
    /// Fraction of the pixel at `(y, x)` covered when the shape sits at
    /// exposure offset `k` (−1, 0, +1).
    fn coverage(&self, y: f64, x: f64, k: f64) -> f64 {
        let cy = self.center.0 + k * self.velocity.0;
        let cx = self.center.1 + k * self.velocity.1;
        // signed distance, negative inside
        let d = match self.kind {
            Kind::Disc { r } => ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - r,
            Kind::Box { hw, hh } => {
                let dy = (y - cy).abs() - hh;
                let dx = (x - cx).abs() - hw;
                dy.max(dx)
            }
        };
        (0.5 - d).clamp(0.0, 1.0)
    }
}

/// A rendered scene plus the pixels untouched by motion.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub sample: Sample,
    /// Radiance of the reference exposure (ground truth × [`RADIANCE_MAX`]).
    pub radiance: Tensor<f32>,
    /// `H·W` flags, true where every shape's coverage is identical in all
    /// three exposures.
    pub static_mask: Vec<bool>,
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

/// Renders scene `seed` at `height × width` with the default stops and gamma.
pub fn render_scene(seed: u64, height: usize, width: usize) -> Result<SynthScene> {
    if height < 32 || width < 32 {
        return Err(Error::InvalidArgument(format!(
            "synthetic scenes need at least 32×32, got {height}×{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let tau = std::f64::consts::TAU;

    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            fy: rng.random_range(0.3..2.0) * tau / hf,
            fx: rng.random_range(0.3..2.0) * tau / wf,
            phase: rng.random_range(0.0..tau),
            amp: rng.random_range(0.3..1.0),
        })
        .collect();
    let amp_total: f64 = waves.iter().map(|w| w.amp).sum();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.7..1.0));

    let shape_count = rng.random_range(2..=5);
    let extent = hf.min(wf);
    let shapes: Vec<Shape> = (0..shape_count)
        .map(|_| {
            let size = rng.random_range(0.08..0.2) * extent;
            let kind = if rng.random::<bool>() {
                Kind::Disc { r: size }
            } else {
                Kind::Box {
                    hw: size * rng.random_range(0.6..1.2),
                    hh: size * rng.random_range(0.6..1.2),
                }
            };
            let speed = rng.random_range(0.02..0.06) * extent;
            let angle = rng.random_range(0.0..tau);
            let level = (BACKGROUND_MIN.ln() + rng.random::<f64>() * (BACKGROUND_MAX / BACKGROUND_MIN).ln()).exp();
            Shape {
                kind,
                center: (rng.random_range(0.15..0.85) * hf, rng.random_range(0.15..0.85) * wf),
                velocity: (speed * angle.sin(), speed * angle.cos()),
                radiance: std::array::from_fn(|_| (level * rng.random_range(0.6..1.0)).min(BACKGROUND_MAX)),
            }
        })
        .collect();

    let plane = height * width;
    let mut frames: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; 3 * plane]);
    let mut static_mask = vec![true; plane];
    for y in 0..height {
        for x in 0..width {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let field: f64 = waves
                .iter()
                .map(|w| w.amp * (w.fy * py + w.fx * px + w.phase).sin())
                .sum::<f64>()
                / amp_total;
            let t = 0.5 + 0.5 * field;
            let bg = (BACKGROUND_MIN.ln() + t * (BACKGROUND_MAX / BACKGROUND_MIN).ln()).exp();
            let i = y * width + x;
            for (k, frame) in frames.iter_mut().enumerate() {
                let offset = k as f64 - 1.0;
                let mut rgb: [f64; 3] = std::array::from_fn(|c| bg * tint[c]);
                for s in &shapes {
                    let a = s.coverage(py, px, offset);
                    for c in 0..3 {
                        rgb[c] = (1.0 - a) * rgb[c] + a * s.radiance[c];
                    }
                }
                for c in 0..3 {
                    frame[c * plane + i] = rgb[c];
                }
            }
            static_mask[i] = shapes.iter().all(|s| {
                let a = s.coverage(py, px, 0.0);
                a == s.coverage(py, px, -1.0) && a == s.coverage(py, px, 1.0)
            });
        }
    }

    let times = DEFAULT_STOPS.map(f64::exp2);
    let gamma = DEFAULT_GAMMA;
    let mut images: [Vec<f32>; 3] = std::array::from_fn(|_| Vec::with_capacity(3 * plane));
    for k in 0..3 {
        for &r in &frames[k] {
            let mut v = (r * times[k]).clamp(0.0, 1.0).powf(1.0 / gamma);
            if v < DARK_LEVEL {
                v = (v + rng.random_range(-DARK_NOISE..DARK_NOISE)).max(0.0);
            }
            images[k].push(((v * 255.0).round() / 255.0) as f32);
        }
    }
    let to_image = |d: Vec<f32>| Tensor::new(vec![1, 3, height, width], d);
    let [i1, i2, i3] = images;
    let stack = ExposureStack::new([to_image(i1)?, to_image(i2)?, to_image(i3)?], times, gamma)?;
    let [_, reference, _] = frames;
    let radiance = to_image(reference.iter().map(|&r| r as f32).collect())?;
    let gt = to_image(reference.iter().map(|&r| (r / RADIANCE_MAX) as f32).collect())?;
    Ok(SynthScene {
        sample: Sample::new(stack, gt)?,
        radiance,
        static_mask,
    })
}

/// The [`Sample`] of [`render_scene`].
pub fn synth_scene(seed: u64, height: usize, width: usize) -> Result<Sample> {
    Ok(render_scene(seed, height, width)?.sample)
}
