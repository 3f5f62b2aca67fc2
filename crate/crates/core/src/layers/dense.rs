use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::param::{join, Param, Parameterized, Slot, SlotRef};
use crate::numerics::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{Differentiable, Tensor};
use crate::scalar::Scalar;

/// `y[N,K] = x[N,D] W[K,D]^T + b[K]`
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("dense")?;
    let (k, wd) = w.dims2("dense")?;
    if wd != d {
        return Err(Error::shape("dense", x.shape(), w.shape()));
    }
    let mut y = Tensor::zeros(&[n, k]);
    if let Some(b) = b {
        b.expect_shape("dense.bias", &[k])?;
        for row in y.data_mut().chunks_mut(k) {
            row.copy_from_slice(b.data());
        }
    }
    gemm_nt(n, d, k, x.data(), w.data(), y.data_mut());
    Ok(y)
}

/// Returns `(gx, gw, gb)`; `gb` is `None` without bias.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, d) = x.dims2("dense_backward")?;
    let (k, _) = w.dims2("dense_backward")?;
    gy.expect_shape("dense_backward", &[n, k])?;
    let mut gx = Tensor::zeros(&[n, d]);
    gemm_nn(n, k, d, gy.data(), w.data(), gx.data_mut());
    let mut gw = Tensor::zeros(&[k, d]);
    gemm_tn(k, n, d, gy.data(), x.data(), gw.data_mut());
    let gb = with_bias.then(|| {
        let mut gb = Tensor::zeros(&[k]);
        for row in gy.data().chunks(k) {
            for (a, &g) in gb.data_mut().iter_mut().zip(row) {
                *a += g;
            }
        }
        gb
    });
    Ok((gx, gw, gb))
}

/// Inputs `[x, W]` or `[x, W, b]`.
#[derive(Clone, Copy, Debug)]
pub struct DenseOp;

impl<T: Scalar> Differentiable<T> for DenseOp {
    fn name(&self) -> &str {
        "dense"
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        dense(&inputs[0], &inputs[1], inputs.get(2))
    }
    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (gx, gw, gb) = dense_backward(&inputs[0], &inputs[1], inputs.len() > 2, cot)?;
        Ok([gx, gw].into_iter().chain(gb).collect())
    }
}

#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Dense<T> {
    /// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, with_bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self::with_scale(input, output, with_bias, bound, rng)
    }

    pub fn with_scale<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        with_bias: bool,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::new(Tensor::uniform(&[output, input], bound, rng)),
            bias: with_bias.then(|| Param::new(Tensor::zeros(&[output]))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dense(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value))
    }

    pub fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, gw, gb) = dense_backward(x, &self.weight.value, self.bias.is_some(), gy)?;
        self.weight.grad.add_assign(&gw)?;
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), gb) {
            b.grad.add_assign(&gb)?;
        }
        Ok(gx)
    }
}

impl<T: Scalar> Parameterized<T> for Dense<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            f(join(prefix, "bias"), Slot::Param(b));
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        f(join(prefix, "weight"), SlotRef::Param(&self.weight));
        if let Some(b) = self.bias.as_ref() {
            f(join(prefix, "bias"), SlotRef::Param(b));
        }
    }
}
