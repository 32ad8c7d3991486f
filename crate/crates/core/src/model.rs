//! The full fusion network: embedding, U-shaped encoder/decoder of RGST
//! blocks, refinement block, shallow branch on the reference exposure and the
//! sigmoid prediction head.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{ConvKind, Graph, Var};
use crate::params::{Bound, Conv, Init, ParameterSet, Specs};
use crate::tensor::{Float, Tensor};
use crate::transformer::{
    declare_downscale, declare_upscale, downscale_transition, run_block, upscale_transition, BlockParams,
    BlockShape, GatingMode,
};

/// Channels of the network input: three exposures × (radiance + LDR) × RGB.
pub const INPUT_CHANNELS: usize = 18;
/// Channels of the reference exposure fed to the shallow branch.
pub const REFERENCE_CHANNELS: usize = 6;
pub const OUTPUT_CHANNELS: usize = 3;

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_width: usize,
    pub scale_count: usize,
    /// RGST units per encoder block, fine to coarse. Decoder blocks reuse the
    /// count of their scale.
    pub rgst_counts: Vec<usize>,
    pub refinement_count: usize,
    pub heads: Vec<usize>,
    pub window: usize,
    pub gating: GatingMode,
    /// Hidden width multiplier of the feed-forward sub-layers.
    pub expansion: usize,
    pub gamma: f64,
    pub mu: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

const KEYS: [&str; 10] = [
    "base_width",
    "scale_count",
    "rgst_counts",
    "refinement_count",
    "heads",
    "window",
    "gating",
    "expansion",
    "gamma",
    "mu",
];

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{v}`")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// Full-size network: width 60, units `[2,3,3,4]`, heads `[1,2,4,4]`, M = 8.
    pub fn full() -> Self {
        ModelConfig {
            base_width: 60,
            scale_count: 4,
            rgst_counts: vec![2, 3, 3, 4],
            refinement_count: 2,
            heads: vec![1, 2, 4, 4],
            window: 8,
            gating: GatingMode::All,
            expansion: 2,
            gamma: 2.2,
            mu: 5000.0,
        }
    }

    /// Same topology at width 16, trainable on a CPU.
    pub fn desk() -> Self {
        ModelConfig {
            base_width: 16,
            ..Self::full()
        }
    }

    /// Smallest useful network: width 8, one unit and one head per scale,
    /// window 4.
    pub fn tiny() -> Self {
        ModelConfig {
            base_width: 8,
            rgst_counts: vec![1, 1, 1, 1],
            refinement_count: 1,
            heads: vec![1, 1, 1, 1],
            window: 4,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset `{other}` (expected full, desk or tiny)"
            ))),
        }
    }

    pub fn with_gating(mut self, gating: GatingMode) -> Self {
        self.gating = gating;
        self
    }

    /// Channel width at 0-based scale `i`.
    pub fn width(&self, scale: usize) -> usize {
        self.base_width << scale
    }

    /// Spatial multiple the input is padded to so that the window divides
    /// every scale.
    pub fn pad_multiple(&self) -> usize {
        self.window << (self.scale_count - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.scale_count == 0 || self.scale_count > 8 {
            return bad(format!("scale_count {} outside 1..=8", self.scale_count));
        }
        if self.rgst_counts.len() != self.scale_count {
            return bad(format!(
                "rgst_counts has {} entries for {} scales",
                self.rgst_counts.len(),
                self.scale_count
            ));
        }
        if self.heads.len() != self.scale_count {
            return bad(format!(
                "heads has {} entries for {} scales",
                self.heads.len(),
                self.scale_count
            ));
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if self.expansion == 0 {
            return bad("expansion must be positive".into());
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let w = self.width(i);
            if h == 0 || w % h != 0 {
                return bad(format!("heads[{i}] = {h} does not divide width {w} at scale {}", i + 1));
            }
            if w / h < 2 {
                return bad(format!(
                    "head dimension {} at scale {} is below 2 (width {w}, {h} heads)",
                    w / h,
                    i + 1
                ));
            }
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return bad(format!("gamma {} must be positive", self.gamma));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return bad(format!("mu {} must be positive", self.mu));
        }
        Ok(())
    }

    /// Whether the feed-forward layers of encoder block `scale` are gated.
    pub fn encoder_gated(&self, scale: usize) -> bool {
        match self.gating {
            GatingMode::All => true,
            GatingMode::First => scale == 0,
            GatingMode::None => false,
        }
    }

    /// Decoder and refinement blocks are gated only in mode `all`.
    pub fn decoder_gated(&self) -> bool {
        self.gating == GatingMode::All
    }

    /// Window footprint in input pixels per side at each scale.
    pub fn count_receptive(&self) -> Vec<usize> {
        (0..self.scale_count).map(|i| self.window << i).collect()
    }

    /// Flat `key=value` text, one field per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "base_width={}", self.base_width);
        let _ = writeln!(s, "scale_count={}", self.scale_count);
        let _ = writeln!(s, "rgst_counts={}", join(&self.rgst_counts));
        let _ = writeln!(s, "refinement_count={}", self.refinement_count);
        let _ = writeln!(s, "heads={}", join(&self.heads));
        let _ = writeln!(s, "window={}", self.window);
        let _ = writeln!(s, "gating={}", self.gating);
        let _ = writeln!(s, "expansion={}", self.expansion);
        let _ = writeln!(s, "gamma={}", self.gamma);
        let _ = writeln!(s, "mu={}", self.mu);
        s
    }

    /// Parses `key=value` lines over the full-size defaults. A `preset=NAME`
    /// line, if present, must come first and replaces the base. Blank lines
    /// and `#` comments are ignored. The result is validated.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::full();
        let mut seen_field = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", n + 1)))?;
            match key {
                "preset" if !seen_field => cfg = Self::preset(value)?,
                "preset" => {
                    return Err(Error::InvalidConfig("`preset` must precede other keys".into()));
                }
                "base_width" => cfg.base_width = parse_num(key, value)?,
                "scale_count" => cfg.scale_count = parse_num(key, value)?,
                "rgst_counts" => cfg.rgst_counts = parse_list(key, value)?,
                "refinement_count" => cfg.refinement_count = parse_num(key, value)?,
                "heads" => cfg.heads = parse_list(key, value)?,
                "window" => cfg.window = parse_num(key, value)?,
                "gating" => cfg.gating = value.parse()?,
                "expansion" => cfg.expansion = parse_num(key, value)?,
                "gamma" => cfg.gamma = parse_num(key, value)?,
                "mu" => cfg.mu = parse_num(key, value)?,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown key `{other}` (known: preset, {})",
                        KEYS.join(", ")
                    )))
                }
            }
            if key != "preset" {
                seen_field = true;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn block_shape(&self, scale: usize, units: usize, gated: bool) -> BlockShape {
        BlockShape {
            dim: self.width(scale),
            units,
            heads: self.heads[scale],
            window: self.window,
            expansion: self.expansion,
            gated,
        }
    }

    /// Ordered parameter declarations.
    pub fn specs(&self) -> Result<Specs> {
        self.validate()?;
        let mut s = Specs::new();
        let c = self.base_width;
        s.conv("embed", INPUT_CHANNELS, c, ConvKind::Full3x3, Init::FanIn);
        for i in 0..self.scale_count {
            if i > 0 {
                declare_downscale(&mut s, &format!("down{i}"), self.width(i - 1));
            }
            let shape = self.block_shape(i, self.rgst_counts[i], self.encoder_gated(i));
            s.scope(&format!("enc{}", i + 1), |s| BlockParams::declare(s, &shape));
        }
        for i in (0..self.scale_count - 1).rev() {
            let w = self.width(i);
            declare_upscale(&mut s, &format!("up{}", i + 1), self.width(i + 1), w);
            s.conv(&format!("fuse{}", i + 1), 2 * w, w, ConvKind::Pointwise, Init::FanIn);
            let shape = self.block_shape(i, self.rgst_counts[i], self.decoder_gated());
            s.scope(&format!("dec{}", i + 1), |s| BlockParams::declare(s, &shape));
        }
        let shape = self.block_shape(0, self.refinement_count, self.decoder_gated());
        s.scope("refine", |s| BlockParams::declare(s, &shape));
        s.conv("shallow", REFERENCE_CHANNELS, c, ConvKind::Full3x3, Init::FanIn);
        s.conv("pred", c, OUTPUT_CHANNELS, ConvKind::Full3x3, Init::FanIn);
        Ok(s)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.specs()?.total_elements())
    }
}

/// Freshly initialized parameters; deterministic in `seed`.
pub fn init_parameters<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    Ok(ParameterSet::initialize(&cfg.specs()?, seed))
}

/// Parameters of a [`ModelConfig`] bound onto a graph.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed: Conv,
    pub down: Vec<Conv>,
    pub enc: Vec<BlockParams>,
    /// Indexed by the 0-based scale the decoder block runs at.
    pub up: Vec<Conv>,
    pub fuse: Vec<Conv>,
    pub dec: Vec<BlockParams>,
    pub refine: BlockParams,
    pub shallow: Conv,
    pub pred: Conv,
}

impl ModelParams {
    pub fn bind(bound: &Bound<'_>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let r = bound.root();
        let mut down = Vec::new();
        let mut enc = Vec::new();
        for i in 0..cfg.scale_count {
            if i > 0 {
                down.push(r.conv(&format!("down{i}"), ConvKind::Pointwise)?);
            }
            let shape = cfg.block_shape(i, cfg.rgst_counts[i], cfg.encoder_gated(i));
            enc.push(BlockParams::bind(&r.sub(&format!("enc{}", i + 1)), &shape)?);
        }
        let (mut up, mut fuse, mut dec) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..cfg.scale_count - 1 {
            up.push(r.conv(&format!("up{}", i + 1), ConvKind::Pointwise)?);
            fuse.push(r.conv(&format!("fuse{}", i + 1), ConvKind::Pointwise)?);
            let shape = cfg.block_shape(i, cfg.rgst_counts[i], cfg.decoder_gated());
            dec.push(BlockParams::bind(&r.sub(&format!("dec{}", i + 1)), &shape)?);
        }
        let shape = cfg.block_shape(0, cfg.refinement_count, cfg.decoder_gated());
        Ok(ModelParams {
            embed: r.conv("embed", ConvKind::Full3x3)?,
            down,
            enc,
            up,
            fuse,
            dec,
            refine: BlockParams::bind(&r.sub("refine"), &shape)?,
            shallow: r.conv("shallow", ConvKind::Full3x3)?,
            pred: r.conv("pred", ConvKind::Full3x3)?,
        })
    }
}

fn check_inputs<T: Float>(x: &Tensor<T>, x2: &Tensor<T>) -> Result<()> {
    let [b, c, h, w] = x.dims4()?;
    let [b2, c2, h2, w2] = x2.dims4()?;
    if c != INPUT_CHANNELS {
        return Err(Error::ChannelMismatch {
            expected: INPUT_CHANNELS,
            got: c,
        });
    }
    if c2 != REFERENCE_CHANNELS {
        return Err(Error::ChannelMismatch {
            expected: REFERENCE_CHANNELS,
            got: c2,
        });
    }
    if (b, h, w) != (b2, h2, w2) {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} and reference {:?} disagree",
            x.shape(),
            x2.shape()
        )));
    }
    if h < 8 || w < 8 {
        return Err(Error::ShapeMismatch(format!("input {h}×{w} is smaller than 8×8")));
    }
    if !x.all_finite() || !x2.all_finite() {
        return Err(Error::NonFinite("network input".into()));
    }
    Ok(())
}

/// Records the network on `g`, returning the `(B, 3, H, W)` prediction.
pub fn forward<T: Float>(g: &mut Graph<T>, p: &ModelParams, cfg: &ModelConfig, x: Var, x2: Var) -> Result<Var> {
    check_inputs(g.value(x), g.value(x2))?;
    let [_, _, h, w] = g.value(x).dims4()?;
    let m = cfg.pad_multiple();
    let pad = [0, h.next_multiple_of(m) - h, 0, w.next_multiple_of(m) - w];
    let (x, x2) = if pad == [0; 4] {
        (x, x2)
    } else {
        (g.reflect_pad(x, pad)?, g.reflect_pad(x2, pad)?)
    };

    let mut skips = Vec::with_capacity(cfg.scale_count);
    let mut e = p.embed.apply(g, x)?;
    for i in 0..cfg.scale_count {
        if i > 0 {
            e = downscale_transition(g, e, &p.down[i - 1])?;
        }
        e = run_block(g, e, &p.enc[i], cfg.window)?;
        skips.push(e);
    }
    let mut d = e;
    for i in (0..cfg.scale_count - 1).rev() {
        let u = upscale_transition(g, d, &p.up[i])?;
        let cat = g.concat_channels(&[u, skips[i]])?;
        let fused = p.fuse[i].apply(g, cat)?;
        d = run_block(g, fused, &p.dec[i], cfg.window)?;
    }
    let r = run_block(g, d, &p.refine, cfg.window)?;
    let s = p.shallow.apply(g, x2)?;
    let sum = g.add(s, r)?;
    let logits = p.pred.apply(g, sum)?;
    let y = g.sigmoid(logits);
    if pad == [0; 4] {
        Ok(y)
    } else {
        g.crop(y, 0, 0, h, w)
    }
}

/// Inference without gradient tracking.
pub fn predict<T: Float>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    x2: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let p = ModelParams::bind(&bound, cfg)?;
    let xv = g.constant(x.clone());
    let x2v = g.constant(x2.clone());
    let y = forward(&mut g, &p, cfg, xv, x2v)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_footprint() {
        assert_eq!(ModelConfig::full().count_receptive(), vec![8, 16, 32, 64]);
        assert_eq!(ModelConfig::full().pad_multiple(), 64);
        assert_eq!(ModelConfig::tiny().pad_multiple(), 32);
    }

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::full(), ModelConfig::desk(), ModelConfig::tiny()] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn width_one_is_rejected() {
        let c = ModelConfig {
            base_width: 1,
            ..ModelConfig::desk()
        };
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let c = ModelConfig {
            heads: vec![1, 2, 3, 4],
            ..ModelConfig::desk()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = ModelConfig::tiny().with_gating(GatingMode::First);
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        let p = ModelConfig::from_text("preset=tiny\n# comment\nwindow=2\n").unwrap();
        assert_eq!(p.window, 2);
        assert_eq!(p.base_width, 8);
        assert!(ModelConfig::from_text("colour=blue").is_err());
        assert!(ModelConfig::from_text("window=2\npreset=tiny").is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let specs = ModelConfig::desk().specs().unwrap();
        let mut names: Vec<&str> = specs.items().iter().map(|p| p.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
