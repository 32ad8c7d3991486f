//! μ-law tone mapping, the L1 + SSIM training loss and the PSNR/SSIM
//! evaluation metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{gaussian_kernel, mu_law_scalar};
use crate::tensor::{Float, Tensor};

/// Compression strength of the tone mapper.
pub const DEFAULT_MU: f64 = 5000.0;

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Gaussian-window SSIM parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the compared signals.
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.sigma <= 0.0 || self.k1 <= 0.0 || self.k2 <= 0.0 || self.range <= 0.0 {
            return Err(Error::InvalidArgument(format!("bad SSIM settings {self:?}")));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }
}

/// `T(x) = ln(1 + μx) / ln(1 + μ)`. Values outside `[0, 1]` are an error.
pub fn mu_law<T: Float>(x: &Tensor<T>, mu: f64) -> Result<Tensor<T>> {
    if mu <= 0.0 {
        return Err(Error::InvalidArgument(format!("mu {mu} must be positive")));
    }
    if let Some(v) = x.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::InvalidArgument(format!("mu-law input {v} outside [0, 1]")));
    }
    let m = T::lit(mu);
    Ok(x.map(|v| mu_law_scalar(v, m)))
}

/// Like [`mu_law`] but clamps out-of-range values into `[0, 1]`, logging a
/// warning when it has to.
pub fn mu_law_clamped<T: Float>(x: &Tensor<T>, mu: f64) -> Result<Tensor<T>> {
    let clamped = x.data().iter().filter(|v| !(**v >= T::zero() && **v <= T::one())).count();
    if clamped > 0 {
        log::warn!("clamping {clamped} values into [0, 1] before tone mapping");
    }
    let nan_free = x.map(|v| if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) });
    mu_law(&nan_free, mu)
}

/// Inverse tone mapping `((1 + μ)^y − 1) / μ`.
pub fn mu_law_inverse<T: Float>(y: &Tensor<T>, mu: f64) -> Tensor<T> {
    y.map(|v| T::lit(((1.0 + mu).powf(v.as_f64()) - 1.0) / mu))
}

/// Records mean local SSIM of `a` and `b` on `g`.
pub fn ssim_graph<T: Float>(g: &mut Graph<T>, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    cfg.validate()?;
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "SSIM of {:?} against {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let k: Vec<T> = gaussian_kernel(cfg.window, cfg.sigma);
    let mu_a = g.blur_valid(a, &k)?;
    let mu_b = g.blur_valid(b, &k)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.blur_valid(aa, &k)?;
    let e_bb = g.blur_valid(bb, &k)?;
    let e_ab = g.blur_valid(ab, &k)?;
    let mu_aa = g.mul(mu_a, mu_a)?;
    let mu_bb = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_aa)?;
    let var_b = g.sub(e_bb, mu_bb)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let (c1, c2) = (T::lit(cfg.c1()), T::lit(cfg.c2()));
    let two = T::lit(2.0);
    let l_num = g.scale(mu_ab, two);
    let l_num = g.add_scalar(l_num, c1);
    let c_num = g.scale(cov, two);
    let c_num = g.add_scalar(c_num, c2);
    let l_den = g.add(mu_aa, mu_bb)?;
    let l_den = g.add_scalar(l_den, c1);
    let c_den = g.add(var_a, var_b)?;
    let c_den = g.add_scalar(c_den, c2);
    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// Mean local SSIM, averaged over batch and channels.
pub fn ssim<T: Float>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let av = g.constant(a.cast());
    let bv = g.constant(b.cast());
    let s = ssim_graph(&mut g, av, bv, cfg)?;
    Ok(g.value(s).item())
}

/// The three loss values of one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// `l1 + l2`
    pub total: Var,
    /// Mean absolute difference of the tone-mapped pair.
    pub l1: Var,
    /// `1 − SSIM` of the tone-mapped pair.
    pub l2: Var,
}

/// Records the training loss between a prediction and its target, both in
/// `[0, 1]`.
pub fn total_loss<T: Float>(g: &mut Graph<T>, pred: Var, gt: Var, mu: f64, cfg: &SsimConfig) -> Result<LossTerms> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} against target {:?}",
            g.shape(pred),
            g.shape(gt)
        )));
    }
    let m = T::lit(mu);
    let tp = g.mu_law(pred, m);
    let tg = g.mu_law(gt, m);
    let diff = g.sub(tp, tg)?;
    let abs = g.abs(diff);
    let l1 = g.mean(abs);
    let s = ssim_graph(g, tp, tg, cfg)?;
    let neg = g.scale(s, -T::one());
    let l2 = g.add_scalar(neg, T::one());
    let total = g.add(l1, l2)?;
    Ok(LossTerms { total, l1, l2 })
}

/// Domain in which PSNR is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Linear,
    Mu,
}

fn mse<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::ShapeMismatch("empty images".into()));
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(total / a.len() as f64)
}

/// `−10·log₁₀(MSE)` for signals on `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * e.log10()).min(PSNR_CAP_DB))
}

/// PSNR after optionally tone mapping both images.
pub fn psnr_in<T: Float>(a: &Tensor<T>, b: &Tensor<T>, domain: Domain, mu: f64) -> Result<f64> {
    match domain {
        Domain::Linear => psnr(a, b),
        Domain::Mu => psnr(&mu_law(a, mu)?, &mu_law(b, mu)?),
    }
}

/// The four reported image metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub psnr_mu: f64,
    pub psnr_l: f64,
    pub ssim_mu: f64,
    pub ssim_l: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "psnr_mu,psnr_l,ssim_mu,ssim_l";

    /// Metrics of a single image pair. Values are clamped into `[0, 1]`
    /// (with a warning) before tone mapping.
    pub fn evaluate<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>, mu: f64, cfg: &SsimConfig) -> Result<Self> {
        pred.expect_same_shape(gt)?;
        let (p, q): (Tensor<f64>, Tensor<f64>) = (pred.cast(), gt.cast());
        let (tp, tq) = (mu_law_clamped(&p, mu)?, mu_law_clamped(&q, mu)?);
        Ok(Metrics {
            psnr_mu: psnr(&tp, &tq)?,
            psnr_l: psnr(&p, &q)?,
            ssim_mu: ssim(&tp, &tq, cfg)?,
            ssim_l: ssim(&p, &q, cfg)?,
        })
    }

    /// Per-image metrics over the batch dimension, averaged.
    pub fn evaluate_batch<T: Float>(pred: &Tensor<T>, gt: &Tensor<T>, mu: f64, cfg: &SsimConfig) -> Result<Self> {
        pred.expect_same_shape(gt)?;
        let [b, ..] = pred.dims4()?;
        let per: Vec<Metrics> = (0..b)
            .map(|i| Self::evaluate(&pred.batch_item(i)?, &gt.batch_item(i)?, mu, cfg))
            .collect::<Result<_>>()?;
        Ok(Self::mean(&per))
    }

    /// Order-independent mean: every field is summed in sorted order.
    pub fn mean(items: &[Metrics]) -> Self {
        let avg = |f: fn(&Metrics) -> f64| {
            let mut v: Vec<f64> = items.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        Metrics {
            psnr_mu: avg(|m| m.psnr_mu),
            psnr_l: avg(|m| m.psnr_l),
            ssim_mu: avg(|m| m.ssim_mu),
            ssim_l: avg(|m| m.ssim_l),
        }
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.psnr_mu, self.psnr_l, self.ssim_mu, self.ssim_l)
    }
}

/// Four `key=value` lines.
impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "psnr_mu={:.6}", self.psnr_mu)?;
        writeln!(f, "psnr_l={:.6}", self.psnr_l)?;
        writeln!(f, "ssim_mu={:.6}", self.ssim_mu)?;
        writeln!(f, "ssim_l={:.6}", self.ssim_l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mu_law_endpoints_and_range() {
        let x = Tensor::new(vec![3], vec![0.0f64, 1.0, 0.5]).unwrap();
        let y = mu_law(&x, DEFAULT_MU).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
        assert!((y.data()[2] - 2501f64.ln() / 5001f64.ln()).abs() < 1e-12);
        let bad = Tensor::new(vec![1], vec![1.5f64]).unwrap();
        assert!(mu_law(&bad, DEFAULT_MU).is_err());
        assert_eq!(mu_law_clamped(&bad, DEFAULT_MU).unwrap().data()[0], 1.0);
    }

    #[test]
    fn psnr_of_uniform_error() {
        let a = Tensor::<f64>::full(vec![1, 1, 4, 4], 0.5);
        let b = Tensor::<f64>::full(vec![1, 1, 4, 4], 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn constant_image_ssim() {
        let a = Tensor::<f64>::full(vec![1, 3, 16, 16], 0.5);
        let b = Tensor::<f64>::full(vec![1, 3, 16, 16], 0.25);
        let c1 = 1e-4;
        let expect = (2.0 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1);
        assert!((ssim(&a, &b, &SsimConfig::default()).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn metrics_print_four_lines() {
        let m = Metrics::default();
        assert_eq!(m.to_string().lines().count(), 4);
        assert_eq!(m.csv_row().split(',').count(), 4);
    }
}
