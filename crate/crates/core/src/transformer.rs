//! Gated feed-forward network, the residual gated Swin transformer unit and
//! the residual blocks and scale transitions built from them.

use std::fmt;
use std::str::FromStr;

use crate::attention::{window_attention, AttentionParams};
use crate::error::{Error, Result};
use crate::graph::{ConvKind, Graph, Var};
use crate::params::{Conv, Init, Norm, Scope, Specs};
use crate::tensor::Float;

/// Which feed-forward sub-layers use the multiplicative gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GatingMode {
    /// Every unit gated.
    #[default]
    All,
    /// Only the units of the first (finest) encoder block.
    First,
    /// No gating: plain two-layer MLP feed-forward everywhere.
    None,
}

impl fmt::Display for GatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatingMode::All => "all",
            GatingMode::First => "first",
            GatingMode::None => "none",
        })
    }
}

impl FromStr for GatingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(GatingMode::All),
            "first" => Ok(GatingMode::First),
            "none" => Ok(GatingMode::None),
            other => Err(Error::InvalidConfig(format!(
                "gating mode `{other}` (expected all, first or none)"
            ))),
        }
    }
}

/// Gated feed-forward: two pointwise→depthwise branches, the first through
/// GELU, multiplied together and projected back.
#[derive(Clone, Copy, Debug)]
pub struct GdfnParams {
    pub norm: Norm,
    pub gate_pw: Conv,
    pub gate_dw: Conv,
    pub value_pw: Conv,
    pub value_dw: Conv,
    pub out: Conv,
}

/// Ungated feed-forward used by the ablation: pointwise, GELU, pointwise.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub norm: Norm,
    pub fc1: Conv,
    pub fc2: Conv,
}

#[derive(Clone, Copy, Debug)]
pub enum FeedForward {
    Gated(GdfnParams),
    Plain(MlpParams),
}

impl FeedForward {
    pub fn declare(specs: &mut Specs, dim: usize, expansion: usize, gated: bool) {
        let hidden = dim * expansion;
        specs.norm("norm", dim);
        if gated {
            specs.conv("gate_pw", dim, hidden, ConvKind::Pointwise, Init::FanIn);
            specs.conv("gate_dw", hidden, hidden, ConvKind::Depthwise3x3, Init::FanIn);
            specs.conv("value_pw", dim, hidden, ConvKind::Pointwise, Init::FanIn);
            specs.conv("value_dw", hidden, hidden, ConvKind::Depthwise3x3, Init::FanIn);
            specs.conv("out", hidden, dim, ConvKind::Pointwise, Init::FanIn);
        } else {
            specs.conv("fc1", dim, hidden, ConvKind::Pointwise, Init::FanIn);
            specs.conv("fc2", hidden, dim, ConvKind::Pointwise, Init::FanIn);
        }
    }

    pub fn bind(scope: &Scope<'_>, gated: bool) -> Result<Self> {
        let norm = scope.norm("norm")?;
        Ok(if gated {
            FeedForward::Gated(GdfnParams {
                norm,
                gate_pw: scope.conv("gate_pw", ConvKind::Pointwise)?,
                gate_dw: scope.conv("gate_dw", ConvKind::Depthwise3x3)?,
                value_pw: scope.conv("value_pw", ConvKind::Pointwise)?,
                value_dw: scope.conv("value_dw", ConvKind::Depthwise3x3)?,
                out: scope.conv("out", ConvKind::Pointwise)?,
            })
        } else {
            FeedForward::Plain(MlpParams {
                norm,
                fc1: scope.conv("fc1", ConvKind::Pointwise)?,
                fc2: scope.conv("fc2", ConvKind::Pointwise)?,
            })
        })
    }

    /// Residual feed-forward sub-layer.
    pub fn apply<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            FeedForward::Gated(p) => gdfn(g, x, p),
            FeedForward::Plain(p) => mlp(g, x, p),
        }
    }
}

/// `x + out(GELU(gate(norm x)) ⊙ value(norm x))`
pub fn gdfn<T: Float>(g: &mut Graph<T>, x: Var, p: &GdfnParams) -> Result<Var> {
    let n = p.norm.apply(g, x)?;
    let a = p.gate_pw.apply(g, n)?;
    let a = p.gate_dw.apply(g, a)?;
    let gate = g.gelu(a);
    let b = p.value_pw.apply(g, n)?;
    let b = p.value_dw.apply(g, b)?;
    let gated = g.mul(gate, b)?;
    let y = p.out.apply(g, gated)?;
    g.add(x, y)
}

/// `x + fc2(GELU(fc1(norm x)))`
pub fn mlp<T: Float>(g: &mut Graph<T>, x: Var, p: &MlpParams) -> Result<Var> {
    let n = p.norm.apply(g, x)?;
    let h = p.fc1.apply(g, n)?;
    let h = g.gelu(h);
    let y = p.fc2.apply(g, h)?;
    g.add(x, y)
}

/// One residual gated Swin transformer unit: window attention, feed-forward,
/// shifted-window attention, feed-forward; every sub-layer residual.
#[derive(Clone, Copy, Debug)]
pub struct RgstParams {
    pub norm1: Norm,
    pub attn1: AttentionParams,
    pub ffn1: FeedForward,
    pub norm2: Norm,
    pub attn2: AttentionParams,
    pub ffn2: FeedForward,
}

impl RgstParams {
    pub fn declare(specs: &mut Specs, dim: usize, heads: usize, window: usize, expansion: usize, gated: bool) {
        specs.norm("norm1", dim);
        specs.scope("attn1", |s| AttentionParams::declare(s, dim, heads, window));
        specs.scope("ffn1", |s| FeedForward::declare(s, dim, expansion, gated));
        specs.norm("norm2", dim);
        specs.scope("attn2", |s| AttentionParams::declare(s, dim, heads, window));
        specs.scope("ffn2", |s| FeedForward::declare(s, dim, expansion, gated));
    }

    pub fn bind(scope: &Scope<'_>, heads: usize, gated: bool) -> Result<Self> {
        Ok(RgstParams {
            norm1: scope.norm("norm1")?,
            attn1: AttentionParams::bind(&scope.sub("attn1"), heads)?,
            ffn1: FeedForward::bind(&scope.sub("ffn1"), gated)?,
            norm2: scope.norm("norm2")?,
            attn2: AttentionParams::bind(&scope.sub("attn2"), heads)?,
            ffn2: FeedForward::bind(&scope.sub("ffn2"), gated)?,
        })
    }
}

pub fn rgst_unit<T: Float>(g: &mut Graph<T>, x: Var, p: &RgstParams, window: usize) -> Result<Var> {
    let n = p.norm1.apply(g, x)?;
    let a = window_attention(g, n, &p.attn1, window, 0)?;
    let x = g.add(x, a)?;
    let x = p.ffn1.apply(g, x)?;
    let n = p.norm2.apply(g, x)?;
    let a = window_attention(g, n, &p.attn2, window, window / 2)?;
    let x = g.add(x, a)?;
    p.ffn2.apply(g, x)
}

/// `n` RGST units followed by a dense 3×3 convolution, wrapped in a skip.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub units: Vec<RgstParams>,
    pub conv: Conv,
}

/// Architectural settings of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub dim: usize,
    pub units: usize,
    pub heads: usize,
    pub window: usize,
    pub expansion: usize,
    pub gated: bool,
}

impl BlockParams {
    pub fn declare(specs: &mut Specs, shape: &BlockShape) {
        for u in 0..shape.units {
            specs.scope(&format!("unit{u}"), |s| {
                RgstParams::declare(s, shape.dim, shape.heads, shape.window, shape.expansion, shape.gated)
            });
        }
        specs.conv("conv", shape.dim, shape.dim, ConvKind::Full3x3, Init::FanIn);
    }

    pub fn bind(scope: &Scope<'_>, shape: &BlockShape) -> Result<Self> {
        let units = (0..shape.units)
            .map(|u| RgstParams::bind(&scope.sub(&format!("unit{u}")), shape.heads, shape.gated))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockParams {
            units,
            conv: scope.conv("conv", ConvKind::Full3x3)?,
        })
    }
}

/// `x + conv3×3(rgst_n(… rgst_1(x)))`
pub fn run_block<T: Float>(g: &mut Graph<T>, x: Var, p: &BlockParams, window: usize) -> Result<Var> {
    let mut h = x;
    for unit in &p.units {
        h = rgst_unit(g, h, unit, window)?;
    }
    let y = p.conv.apply(g, h)?;
    g.add(x, y)
}

/// Pixel-unshuffle by 2 then pointwise `4C → 2C`.
pub fn downscale_transition<T: Float>(g: &mut Graph<T>, x: Var, conv: &Conv) -> Result<Var> {
    let s = g.pixel_unshuffle(x, 2)?;
    conv.apply(g, s)
}

/// Pointwise `C_in → 4·C_out` then pixel-shuffle by 2 to `C_out`.
pub fn upscale_transition<T: Float>(g: &mut Graph<T>, x: Var, conv: &Conv) -> Result<Var> {
    let y = conv.apply(g, x)?;
    g.pixel_shuffle(y, 2)
}

pub fn declare_downscale(specs: &mut Specs, name: &str, dim: usize) {
    specs.conv(name, 4 * dim, 2 * dim, ConvKind::Pointwise, Init::FanIn);
}

pub fn declare_upscale(specs: &mut Specs, name: &str, dim_in: usize, dim_out: usize) {
    specs.conv(name, dim_in, 4 * dim_out, ConvKind::Pointwise, Init::FanIn);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gating_mode_parses_and_prints() {
        for m in [GatingMode::All, GatingMode::First, GatingMode::None] {
            assert_eq!(m.to_string().parse::<GatingMode>().unwrap(), m);
        }
        assert!("sometimes".parse::<GatingMode>().is_err());
    }
}
