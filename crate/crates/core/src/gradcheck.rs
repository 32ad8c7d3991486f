//! Central finite-difference oracle for checking analytic gradients.
//!
//! The check always runs in `f64`. For every input tensor it compares the
//! analytic gradient with `(f(x + h·e) − f(x − h·e)) / 2h` either on every
//! element or on a seeded sample (which always includes the element with the
//! largest analytic gradient). An optional directional test perturbs a whole
//! tensor along a random ±1 direction, so elements outside the sample still
//! contribute.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// `None` checks every element.
    pub samples_per_input: Option<usize>,
    pub directional: bool,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            samples_per_input: None,
            directional: false,
            seed: 0,
        }
    }
}

/// One analytic/numeric comparison.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub input: String,
    /// Element index, or `None` for a directional check.
    pub index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

impl Comparison {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.abs_error() / scale
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    /// Largest relative error among comparisons above the absolute floor.
    pub max_rel_error: f64,
    pub failures: Vec<Comparison>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl GradCheck {
    fn judge(&self, c: Comparison, report: &mut GradCheckReport) {
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(c.abs_error());
        if c.abs_error() <= self.abs_floor {
            return;
        }
        report.max_rel_error = report.max_rel_error.max(c.rel_error());
        if c.rel_error() > self.rel_tol {
            report.failures.push(c);
        }
    }

    /// Checks `f`, a scalar function of the named `inputs`.
    pub fn run<F>(&self, inputs: &[(String, Tensor<f64>)], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f(&mut g, &vars)?;
            Ok(g.value(loss).item())
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport::default();
        let h = self.step;
        for (slot, (name, value)) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[slot]).expect("param gradient").clone();
            let mut current: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();

            let indices: Vec<usize> = match self.samples_per_input {
                Some(k) if k < value.len() => {
                    let argmax = analytic
                        .data()
                        .iter()
                        .enumerate()
                        .fold((0, -1.0), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
                        .0;
                    let mut idx: Vec<usize> = sample(&mut rng, value.len(), k).into_vec();
                    if !idx.contains(&argmax) {
                        idx.push(argmax);
                    }
                    idx.sort_unstable();
                    idx
                }
                _ => (0..value.len()).collect(),
            };

            for i in indices {
                current[slot].data_mut()[i] = value.data()[i] + h;
                let fp = eval(&current)?;
                current[slot].data_mut()[i] = value.data()[i] - h;
                let fm = eval(&current)?;
                current[slot].data_mut()[i] = value.data()[i];
                self.judge(
                    Comparison {
                        input: name.clone(),
                        index: Some(i),
                        analytic: analytic.data()[i],
                        numeric: (fp - fm) / (2.0 * h),
                    },
                    &mut report,
                );
            }

            if self.directional {
                let dir: Vec<f64> = (0..value.len())
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let shift = |sgn: f64| {
                    let mut t = value.clone();
                    for (v, d) in t.data_mut().iter_mut().zip(&dir) {
                        *v += sgn * h * d;
                    }
                    t
                };
                current[slot] = shift(1.0);
                let fp = eval(&current)?;
                current[slot] = shift(-1.0);
                let fm = eval(&current)?;
                let projected: f64 = analytic.data().iter().zip(&dir).map(|(a, d)| a * d).sum();
                self.judge(
                    Comparison {
                        input: name.clone(),
                        index: None,
                        analytic: projected,
                        numeric: (fp - fm) / (2.0 * h),
                    },
                    &mut report,
                );
            }
        }
        Ok(report)
    }
}
