//! Elementwise kernels and their backward maps.
//!
//! Binary ops accept identical shapes or one of the two attention-scaling
//! broadcasts: `[N,C,1,1]` or `[N,1,H,W]` against `[N,C,H,W]`. Anything else
//! is rejected.

use crate::error::{Error, Result};
use crate::numerics::grad::Differentiable;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Mul => "mul",
            Elementwise::Relu => "relu",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Tanh => "tanh",
        }
    }
}

/// How the second operand maps onto the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[N,C,1,1]` against `[N,C,H,W]`
    PerChannel { n: usize, c: usize, hw: usize },
    /// `[N,1,H,W]` against `[N,C,H,W]`
    PerPixel { n: usize, c: usize, hw: usize },
}

fn broadcast_kind(full: &[usize], small: &[usize]) -> Option<Broadcast> {
    if full == small {
        return Some(Broadcast::Same);
    }
    match (full, small) {
        ([n, c, h, w], [n2, c2, 1, 1]) if n == n2 && c == c2 => Some(Broadcast::PerChannel {
            n: *n,
            c: *c,
            hw: h * w,
        }),
        ([n, c, h, w], [n2, 1, h2, w2]) if n == n2 && h == h2 && w == w2 => {
            Some(Broadcast::PerPixel {
                n: *n,
                c: *c,
                hw: h * w,
            })
        }
        _ => None,
    }
}

/// Index into the broadcast operand for flat index `i` of the full operand.
#[inline]
fn small_index(kind: Broadcast, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::PerChannel { hw, .. } => i / hw,
        Broadcast::PerPixel { c, hw, .. } => {
            let n = i / (c * hw);
            n * hw + i % hw
        }
    }
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    // Saturated values are pulled back inside the open interval (0, 1).
    s.max(T::min_positive_value()).min(T::one_minus_ulp())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

/// Applies `op`. Binary ops take `b` as the (possibly broadcast) second operand.
pub fn elementwise<T: Scalar>(
    op: Elementwise,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    match (op, b) {
        (Elementwise::Relu, None) => Ok(relu(a)),
        (Elementwise::Sigmoid, None) => Ok(sigmoid(a)),
        (Elementwise::Tanh, None) => Ok(tanh(a)),
        (Elementwise::Add | Elementwise::Mul, Some(b)) => {
            // Both operand orders are accepted since add and mul commute.
            let (full, small) = if broadcast_kind(a.shape(), b.shape()).is_some() {
                (a, b)
            } else {
                (b, a)
            };
            let kind = broadcast_kind(full.shape(), small.shape())
                .ok_or_else(|| Error::shape(op.name(), a.shape(), b.shape()))?;
            let sd = small.data();
            let f = |x: T, y: T| if op == Elementwise::Add { x + y } else { x * y };
            let data = full
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, sd[small_index(kind, i)]))
                .collect();
            Tensor::new(full.shape(), data)
        }
        (op, _) => Err(Error::InvalidArgument(format!(
            "{} called with wrong operand count",
            op.name()
        ))),
    }
}

/// Sums a full-shape cotangent down onto the broadcast operand's shape.
fn reduce_to<T: Scalar>(kind: Broadcast, small_shape: &[usize], g: &[T]) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(small_shape);
    let od = out.data_mut();
    for (i, &v) in g.iter().enumerate() {
        od[small_index(kind, i)] += v;
    }
    Ok(out)
}

/// Cotangents of `elementwise(op, a, b)` w.r.t. `a` and `b`.
///
/// `out` must be the forward output; sigmoid and tanh backward read it.
pub fn elementwise_backward<T: Scalar>(
    op: Elementwise,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
    out: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    grad.expect_shape(op.name(), out.shape())?;
    match (op, b) {
        (Elementwise::Relu, None) => Ok((a.zip_map(grad, |x, g| if x > T::zero() { g } else { T::zero() })?, None)),
        (Elementwise::Sigmoid, None) => Ok((out.zip_map(grad, |y, g| g * y * (T::one() - y))?, None)),
        (Elementwise::Tanh, None) => Ok((out.zip_map(grad, |y, g| g * (T::one() - y * y))?, None)),
        (Elementwise::Add | Elementwise::Mul, Some(b)) => {
            let a_is_full = broadcast_kind(a.shape(), b.shape()).is_some();
            let (full, small) = if a_is_full { (a, b) } else { (b, a) };
            let kind = broadcast_kind(full.shape(), small.shape())
                .ok_or_else(|| Error::shape(op.name(), a.shape(), b.shape()))?;
            let (g_full, g_small) = if op == Elementwise::Add {
                (grad.clone(), reduce_to(kind, small.shape(), grad.data())?)
            } else {
                let sd = small.data();
                let fd = full.data();
                let gd = grad.data();
                let g_full = Tensor::from_fn(full.shape(), |i| gd[i] * sd[small_index(kind, i)]);
                let prod: Vec<T> = gd.iter().zip(fd).map(|(&g, &x)| g * x).collect();
                (g_full, reduce_to(kind, small.shape(), &prod)?)
            };
            if a_is_full {
                Ok((g_full, Some(g_small)))
            } else {
                Ok((g_small, Some(g_full)))
            }
        }
        (op, _) => Err(Error::InvalidArgument(format!(
            "{} called with wrong operand count",
            op.name()
        ))),
    }
}

/// [`Differentiable`] adapter over [`elementwise`].
#[derive(Clone, Copy, Debug)]
pub struct ElementwiseOp(pub Elementwise);

impl<T: Scalar> Differentiable<T> for ElementwiseOp {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        elementwise(self.0, &inputs[0], inputs.get(1))
    }

    fn backward(
        &self,
        inputs: &[Tensor<T>],
        output: &Tensor<T>,
        cotangent: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let (ga, gb) = elementwise_backward(self.0, &inputs[0], inputs.get(1), output, cotangent)?;
        Ok(std::iter::once(ga).chain(gb).collect())
    }
}
