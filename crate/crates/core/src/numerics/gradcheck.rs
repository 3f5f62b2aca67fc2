//! Central finite-difference verification of backward maps.
//!
//! A vector-valued op is reduced to the scalar `L = <r, f(inputs)>` with a
//! fixed pseudo-random cotangent `r`; the analytic gradient of `L` is
//! `backward(r)` and is compared element-by-element against
//! `(L(x + eps) - L(x - eps)) / (2 eps)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::grad::Differentiable;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Seed of the random output cotangent `r`.
    pub cotangent_seed: u64,
    /// Check at most this many randomly chosen elements per input.
    /// `None` checks every element.
    pub max_elements_per_input: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            cotangent_seed: 0x5eed,
            max_elements_per_input: None,
            sample_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub max_relative_error: T,
    /// `(input, element)` at which the maximum was attained.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Max over every element of every input of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<T: Scalar>(
    op: &dyn Differentiable<T>,
    inputs: &[Tensor<T>],
    eps: T,
) -> Result<T> {
    let opts = GradCheckOptions {
        eps: eps.as_f64(),
        ..Default::default()
    };
    Ok(grad_check_with(op, inputs, &opts)?.max_relative_error)
}

pub fn grad_check_with<T: Scalar>(
    op: &dyn Differentiable<T>,
    inputs: &[Tensor<T>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport<T>> {
    let eps = T::lit(opts.eps);
    let output = op.forward(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.cotangent_seed);
    let cot = Tensor::<T>::randn(output.shape(), 1.0, &mut rng);
    let analytic = op.backward(inputs, &output, &cot)?;
    if analytic.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: backward returned {} cotangents for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }

    let objective = |xs: &[Tensor<T>]| -> Result<T> { op.forward(xs)?.dot(&cot) };

    let mut sample_rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: T::zero(),
        worst: (0, 0),
        checked: 0,
    };
    for (k, grad) in analytic.iter().enumerate() {
        grad.expect_shape("grad_check", inputs[k].shape())?;
        let indices: Vec<usize> = match opts.max_elements_per_input {
            Some(m) if m < inputs[k].len() => {
                let mut v = sample(&mut sample_rng, inputs[k].len(), m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..inputs[k].len()).collect(),
        };
        for i in indices {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = objective(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = objective(&work)?;
            work[k].data_mut()[i] = orig;

            let numeric = (plus - minus) / (eps + eps);
            let a = grad.data()[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{}: gradient of input {} at index {}: analytic {}, numeric {}",
                    op.name(),
                    k,
                    i,
                    a,
                    numeric
                )));
            }
            let err = (a - numeric).abs() / numeric.abs().max(T::one());
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (k, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Max elementwise deviation of `backward(a g1 + b g2)` from
/// `a backward(g1) + b backward(g2)`.
pub fn backward_linearity_error<T: Scalar>(
    op: &dyn Differentiable<T>,
    inputs: &[Tensor<T>],
    g1: &Tensor<T>,
    g2: &Tensor<T>,
    a: T,
    b: T,
) -> Result<T> {
    let out = op.forward(inputs)?;
    let mut mixed = g1.scale(a);
    mixed.axpy(b, g2)?;
    let lhs = op.backward(inputs, &out, &mixed)?;
    let r1 = op.backward(inputs, &out, g1)?;
    let r2 = op.backward(inputs, &out, g2)?;
    let mut worst = T::zero();
    for ((l, x), y) in lhs.iter().zip(&r1).zip(&r2) {
        let mut rhs = x.scale(a);
        rhs.axpy(b, y)?;
        worst = worst.max(l.max_abs_diff(&rhs)?);
    }
    Ok(worst)
}
