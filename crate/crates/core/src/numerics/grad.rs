use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// A pure operation with an explicit backward map.
///
/// `backward` receives the forward inputs, the forward output and a cotangent
/// shaped like the output, and returns one cotangent per input, each shaped
/// like that input.
pub trait Differentiable<T: Scalar> {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>>;

    fn backward(
        &self,
        inputs: &[Tensor<T>],
        output: &Tensor<T>,
        cotangent: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

/// One recorded application of a [`Differentiable`] op.
pub struct GradRecord<'op, T: Scalar> {
    op: &'op dyn Differentiable<T>,
    inputs: Vec<Tensor<T>>,
    output: Tensor<T>,
}

impl<'op, T: Scalar> GradRecord<'op, T> {
    pub fn record(op: &'op dyn Differentiable<T>, inputs: Vec<Tensor<T>>) -> Result<Self> {
        let output = op.forward(&inputs)?;
        Ok(Self { op, inputs, output })
    }

    pub fn op_name(&self) -> &str {
        self.op.name()
    }

    pub fn inputs(&self) -> &[Tensor<T>] {
        &self.inputs
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    /// Maps an output cotangent to per-input cotangents, checking that the
    /// shapes mirror the forward pass.
    pub fn backward(&self, cotangent: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        cotangent.expect_shape("grad_record.backward", self.output.shape())?;
        let grads = self.op.backward(&self.inputs, &self.output, cotangent)?;
        if grads.len() != self.inputs.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: backward returned {} cotangents for {} inputs",
                self.op.name(),
                grads.len(),
                self.inputs.len()
            )));
        }
        for (g, x) in grads.iter().zip(&self.inputs) {
            g.expect_shape("grad_record.backward", x.shape())?;
        }
        Ok(grads)
    }
}

/// Runs `records` backwards (reverse topological order for a chain) starting
/// from the cotangent of the last output; returns the cotangent of the first
/// record's first input. Each record's first input must be the previous
/// record's output.
pub fn backprop_chain<T: Scalar>(
    records: &[GradRecord<'_, T>],
    cotangent: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = cotangent.clone();
    for rec in records.iter().rev() {
        g = rec.backward(&g)?.swap_remove(0);
    }
    Ok(g)
}
