//! Elementwise arithmetic, activations, reductions and softmax.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{numel, Float, Tensor};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// 1/√(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `x·Φ(x)` with the exact error-function form of the normal CDF.
#[inline]
pub fn gelu_scalar<T: Float>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_derivative<T: Float>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(FRAC_1_SQRT_2)).erf());
    let pdf = T::lit(INV_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
    cdf + x * pdf
}

/// Logistic function, kept strictly inside `(0, 1)` at the working
/// precision: saturated values stop one ulp short of the bounds.
#[inline]
pub fn sigmoid_scalar<T: Float>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    let half_eps = T::epsilon() * T::lit(0.5);
    s.max(T::min_positive_value()).min(T::one() - half_eps)
}

/// `ln(1 + μx) / ln(1 + μ)`
#[inline]
pub fn mu_law_scalar<T: Float>(x: T, mu: T) -> T {
    (mu * x).ln_1p() / mu.ln_1p()
}

pub fn gelu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(src[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    if shape[axis] == 0 {
        return Err(Error::InvalidArgument("softmax over an empty axis".into()));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

pub(crate) fn softmax_backward<T: Float>(
    g: &Tensor<T>,
    y: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(y.shape(), axis)?;
    let (gd, yd) = (g.data(), y.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut inner_prod = T::zero();
            for j in 0..n {
                inner_prod += gd[at(j)] * yd[at(j)];
            }
            for j in 0..n {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - inner_prod);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

pub(crate) fn gelu_backward<T: Float>(g: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    g.zip_map(x, |g, x| g * gelu_derivative(x))
}

pub(crate) fn mu_law_backward<T: Float>(g: &Tensor<T>, x: &Tensor<T>, mu: T) -> Result<Tensor<T>> {
    let denom = mu.ln_1p();
    g.zip_map(x, |g, x| g * mu / ((T::one() + mu * x) * denom))
}

pub(crate) fn div_backward<T: Float>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    va: Var,
    vb: Var,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let ga = g.zip_map(b, |g, b| g / b)?;
    let mut gb = ga.zip_map(a, |q, a| q * a)?;
    gb = gb.zip_map(b, |v, b| -v / b)?;
    Ok(vec![(va, ga), (vb, gb)])
}

impl<T: Float> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.record(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.record(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.record(out, Op::AddScalar(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.record(out, Op::Abs(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        self.record(out, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = gelu(self.value(a));
        self.record(out, Op::Gelu(a), &[a])
    }

    /// Differentiable μ-law range compressor.
    pub fn mu_law(&mut self, a: Var, mu: T) -> Var {
        let out = self.value(a).map(|x| mu_law_scalar(x, mu));
        self.record(out, Op::MuLaw(a, mu), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.record(out, Op::Mean(a), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        Ok(self.record(out, Op::Softmax { x, axis }, &[x]))
    }
}
