//! Shifted-window multi-head self-attention.
//!
//! Features are split into non-overlapping `M×M` windows and every token
//! attends to the other tokens of its window. Alternate layers first roll
//! the feature map by `−⌊M/2⌋` so windows straddle the previous window
//! borders; an additive mask keeps tokens that were not neighbours before the
//! roll from attending to each other.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{ConvKind, Graph, Var};
use crate::ops::attention::bias_table_side;
use crate::params::{Conv, Init, Scope, Specs};
use crate::tensor::Float;

pub use crate::ops::layout::{window_partition, window_reverse};

/// Additive logit for token pairs that must not attend to each other.
pub const MASKED_LOGIT: f64 = -1e9;

/// Initialization std of projections and the relative-position bias table.
pub const PROJECTION_STD: f64 = 0.02;

/// Bound parameters of one attention sub-layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub proj: Conv,
    /// `(heads, (2M−1)²)` relative-position bias.
    pub rel_bias: Var,
    pub heads: usize,
}

impl AttentionParams {
    pub fn declare(specs: &mut Specs, dim: usize, heads: usize, window: usize) {
        let init = Init::TruncNormal(PROJECTION_STD);
        for name in ["q", "k", "v", "proj"] {
            specs.conv(name, dim, dim, ConvKind::Pointwise, init);
        }
        let side = bias_table_side(window);
        specs.add("rel_bias", vec![heads, side * side], init);
    }

    pub fn bind(scope: &Scope<'_>, heads: usize) -> Result<Self> {
        Ok(AttentionParams {
            q: scope.conv("q", ConvKind::Pointwise)?,
            k: scope.conv("k", ConvKind::Pointwise)?,
            v: scope.conv("v", ConvKind::Pointwise)?,
            proj: scope.conv("proj", ConvKind::Pointwise)?,
            rel_bias: scope.var("rel_bias")?,
            heads,
        })
    }
}

/// Per-window additive masks for shifted attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftMask {
    pub window: usize,
    /// Windows per image, row-major.
    pub windows: usize,
    /// Region id of every pixel of the rolled frame (`H·W`, row-major).
    pub labels: Vec<usize>,
    /// `windows × M² × M²` entries, each `0` or [`MASKED_LOGIT`].
    pub values: Vec<f64>,
}

impl ShiftMask {
    pub fn block(&self, win: usize) -> &[f64] {
        let n = self.window * self.window;
        &self.values[win * n * n..(win + 1) * n * n]
    }

    pub fn values_as<T: Float>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::lit(v)).collect()
    }
}

/// Builds the masks for an `H×W` map rolled by `−shift`.
///
/// Pixels are labelled by which of the (up to three per axis) bands of the
/// rolled frame they fall in: `[0, H−M)`, `[H−M, H−shift)`, `[H−shift, H)`.
/// Labels are renumbered densely in order of first appearance.
pub fn build_shift_mask(height: usize, width: usize, window: usize, shift: usize) -> Result<ShiftMask> {
    if window == 0 || shift >= window {
        return Err(Error::InvalidArgument(format!(
            "shift {shift} must be smaller than window {window}"
        )));
    }
    if height % window != 0 || width % window != 0 {
        return Err(Error::Divisibility(format!(
            "window {window} must divide {height}×{width}"
        )));
    }
    let band = |i: usize, n: usize| -> usize {
        if shift == 0 || i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut dense = [usize::MAX; 9];
    let mut next = 0;
    let mut labels = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let raw = band(y, height) * 3 + band(x, width);
            if dense[raw] == usize::MAX {
                dense[raw] = next;
                next += 1;
            }
            labels.push(dense[raw]);
        }
    }

    let (nh, nw) = (height / window, width / window);
    let n = window * window;
    let mut values = vec![0.0; nh * nw * n * n];
    if shift > 0 {
        for wy in 0..nh {
            for wx in 0..nw {
                let win = wy * nw + wx;
                let label = |t: usize| labels[(wy * window + t / window) * width + wx * window + t % window];
                for i in 0..n {
                    for j in 0..n {
                        if label(i) != label(j) {
                            values[(win * n + i) * n + j] = MASKED_LOGIT;
                        }
                    }
                }
            }
        }
    }
    Ok(ShiftMask {
        window,
        windows: nh * nw,
        labels,
        values,
    })
}

/// Multi-head self-attention inside `M×M` windows, optionally shifted.
///
/// With `shift > 0` the input is rolled by `(−shift, −shift)`, attended with
/// the shift mask, and rolled back.
pub fn window_attention<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    window: usize,
    shift: usize,
) -> Result<Var> {
    let [_, c, h, w] = g.value(x).dims4()?;
    let d_model = g.shape(p.q.weight)[1];
    if c != d_model {
        return Err(Error::ChannelMismatch {
            expected: d_model,
            got: c,
        });
    }
    let (input, mask) = if shift > 0 {
        let mask = build_shift_mask(h, w, window, shift)?;
        let rolled = g.roll(x, -(shift as isize), -(shift as isize))?;
        (rolled, Some(Arc::new(mask.values_as::<T>())))
    } else {
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::Divisibility(format!(
                "window {window} must divide {h}×{w}"
            )));
        }
        (x, None)
    };
    let q = p.q.apply(g, input)?;
    let k = p.k.apply(g, input)?;
    let v = p.v.apply(g, input)?;
    let attended = g.window_attention_core(q, k, v, p.rel_bias, p.heads, window, mask)?;
    let out = p.proj.apply(g, attended)?;
    if shift > 0 {
        g.roll(out, shift as isize, shift as isize)
    } else {
        Ok(out)
    }
}
