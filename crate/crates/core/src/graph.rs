//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive executed during a forward pass as a
//! node holding its output value and whatever its backward rule needs. Node
//! indices are assigned in execution order, so walking the tape from the end
//! back to the start is an exact reverse topological traversal.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{attention, blur, conv, elementwise, layout, norm};
use crate::tensor::{Float, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution flavours used by the network. All are stride 1 and keep the
/// spatial size; the 3×3 kinds pad by reflection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// 1×1, weight `(O, I, 1, 1)`.
    Pointwise,
    /// 3×3 per channel, weight `(C, 1, 3, 3)`.
    Depthwise3x3,
    /// Dense 3×3, weight `(O, I, 3, 3)`.
    Full3x3,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Sigmoid(Var),
    Gelu(Var),
    MuLaw(Var, T),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        kind: ConvKind,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    Roll {
        x: Var,
        shift_h: isize,
        shift_w: isize,
    },
    ReflectPad {
        x: Var,
        pad: [usize; 4],
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Concat(Vec<Var>),
    WindowPartition {
        x: Var,
        window: usize,
    },
    WindowReverse {
        x: Var,
        window: usize,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        heads: usize,
        window: usize,
        mask: Option<Arc<Vec<T>>>,
        probs: Vec<T>,
    },
    GaussianBlur {
        x: Var,
        kernel: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Record of one forward pass.
///
/// Single writer: one forward/backward pair at a time. After
/// [`Graph::backward`] has run, calling it again is an error until a new
/// operation is recorded.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    differentiated: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.differentiated = false;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an op whose gradient requirement is inherited from `inputs`.
    pub(crate) fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// Every trainable leaf gets a gradient; leaves the loss does not depend
    /// on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(Error::DoubleBackward);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (v, contrib) in self.op_backward(idx, &g)? {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.needs_grad => {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())))
                }
                _ => None,
            })
            .collect();
        self.differentiated = true;
        Ok(Gradients { grads })
    }

    fn op_backward(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, g.zip_map(val(*b), |g, y| g * y)?));
                }
                if needs(*b) {
                    out.push((*b, g.zip_map(val(*a), |g, x| g * x)?));
                }
                out
            }
            Op::Div(a, b) => elementwise::div_backward(g, val(*a), val(*b), *a, *b)?,
            Op::Scale(a, s) => {
                let s = *s;
                vec![(*a, g.map(|v| v * s))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sign(x))?)],
            Op::Sigmoid(a) => vec![(
                *a,
                g.zip_map(&node.value, |g, y| g * y * (T::one() - y))?,
            )],
            Op::Gelu(a) => vec![(*a, elementwise::gelu_backward(g, val(*a))?)],
            Op::MuLaw(a, mu) => vec![(*a, elementwise::mu_law_backward(g, val(*a), *mu)?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()))],
            Op::Mean(a) => {
                let x = val(*a);
                let n = T::lit(x.len() as f64);
                vec![(*a, Tensor::full(x.shape().to_vec(), g.item() / n))]
            }
            Op::Softmax { x, axis } => {
                vec![(*x, elementwise::softmax_backward(g, &node.value, *axis)?)]
            }
            Op::Conv2d { x, w, b, kind } => conv::backward(
                g,
                (*x, val(*x), needs(*x)),
                (*w, val(*w), needs(*w)),
                (*b, needs(*b)),
                *kind,
            )?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => norm::layer_norm_backward(
                g,
                (*x, val(*x), needs(*x)),
                (*gamma, val(*gamma), needs(*gamma)),
                (*beta, needs(*beta)),
                mean,
                rstd,
            )?,
            Op::PixelShuffle { x, r } => vec![(*x, layout::pixel_unshuffle(g, *r)?)],
            Op::PixelUnshuffle { x, r } => vec![(*x, layout::pixel_shuffle(g, *r)?)],
            Op::Roll {
                x,
                shift_h,
                shift_w,
            } => vec![(*x, layout::roll(g, -*shift_h, -*shift_w)?)],
            Op::ReflectPad { x, pad } => {
                vec![(*x, layout::reflect_pad_backward(g, val(*x).shape(), *pad)?)]
            }
            Op::Crop { x, top, left } => {
                vec![(*x, layout::crop_backward(g, val(*x).shape(), *top, *left)?)]
            }
            Op::Concat(parts) => {
                let sizes: Vec<usize> = parts.iter().map(|p| val(*p).shape()[1]).collect();
                parts
                    .iter()
                    .copied()
                    .zip(layout::split_channels(g, &sizes)?)
                    .collect()
            }
            Op::WindowPartition { x, window } => {
                let [_, _, h, w] = val(*x).dims4()?;
                vec![(*x, layout::window_reverse(g, *window, h, w)?)]
            }
            Op::WindowReverse { x, window } => {
                vec![(*x, layout::window_partition(g, *window)?)]
            }
            Op::WindowAttention {
                q,
                k,
                v,
                bias,
                heads,
                window,
                mask,
                probs,
            } => attention::backward(
                g,
                [*q, *k, *v],
                [val(*q), val(*k), val(*v)],
                *bias,
                val(*bias).shape(),
                *heads,
                *window,
                mask.as_deref().map(|m| m.as_slice()),
                probs,
            )?,
            Op::GaussianBlur { x, kernel } => {
                vec![(*x, blur::blur_valid_backward(g, val(*x).shape(), kernel)?)]
            }
        })
    }
}

#[inline]
fn sign<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gradients of every trainable leaf after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a trainable leaf; `None` for constants and intermediates.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let xv = Tensor::from_fn(vec![4], |i| i as f64 - 1.5);
        let yv = Tensor::from_fn(vec![4], |i| 2.0 * i as f64 + 0.25);
        let x = g.param(xv.clone());
        let y = g.param(yv.clone());
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &yv);
        assert_eq!(grads.get(y).unwrap(), &xv);
    }

    #[test]
    fn double_backward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(vec![3]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::DoubleBackward)));
        // recording a fresh forward re-arms it
        let s2 = g.mean(x);
        assert!(g.backward(s2).is_ok());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(vec![3]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(vec![3]));
        let unused = g.param(Tensor::ones(vec![2, 2]));
        let c = g.constant(Tensor::ones(vec![3]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(vec![2, 2]));
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx sum(x * x) = 2x
        let mut g = Graph::<f64>::new();
        let xv = Tensor::from_fn(vec![5], |i| i as f64 - 2.0);
        let x = g.param(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &xv.map(|v| 2.0 * v));
    }
}
