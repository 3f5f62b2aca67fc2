//! Per-channel batch normalisation over `[N,C,H,W]`.

use crate::error::{Error, Result};
use crate::layers::param::{join, Param, Parameterized, Slot, SlotRef};
use crate::numerics::{Differentiable, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Saved forward state needed by the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Biased batch statistics; empty in eval mode.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    gamma.expect_shape("batch_norm.gamma", &[c])?;
    beta.expect_shape("batch_norm.beta", &[c])?;
    Ok((n, c, h * w))
}

/// Normalises with batch statistics. Needs at least two values per channel.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, hw) = check(x, gamma, beta)?;
    let m = n * hw;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_norm in train mode needs at least 2 values per channel, got {m} (shape {:?})",
            x.shape()
        )));
    }
    let xd = x.data();
    let mf = T::from_usize(m).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for s_ in 0..n {
            let base = (s_ * c + ch) * hw;
            s += xd[base..base + hw].iter().copied().sum::<T>();
        }
        let mu = s / mf;
        let mut v = T::zero();
        for s_ in 0..n {
            let base = (s_ * c + ch) * hw;
            v += xd[base..base + hw].iter().map(|&a| (a - mu) * (a - mu)).sum::<T>();
        }
        mean[ch] = mu;
        var[ch] = v / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xhat = Tensor::from_fn(x.shape(), |i| {
        let ch = (i / hw) % c;
        (xd[i] - mean[ch]) * inv_std[ch]
    });
    let (gd, bd) = (gamma.data(), beta.data());
    let y = Tensor::from_fn(x.shape(), |i| {
        let ch = (i / hw) % c;
        gd[ch] * xhat.data()[i] + bd[ch]
    });
    Ok((
        y,
        BnCache {
            mode: BnMode::Train,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Affine transform with fixed running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (_, c, hw) = check(x, gamma, beta)?;
    running_mean.expect_shape("batch_norm.running_mean", &[c])?;
    running_var.expect_shape("batch_norm.running_var", &[c])?;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let (xd, rm) = (x.data(), running_mean.data());
    let xhat = Tensor::from_fn(x.shape(), |i| {
        let ch = (i / hw) % c;
        (xd[i] - rm[ch]) * inv_std[ch]
    });
    let (gd, bd) = (gamma.data(), beta.data());
    let y = Tensor::from_fn(x.shape(), |i| {
        let ch = (i / hw) % c;
        gd[ch] * xhat.data()[i] + bd[ch]
    });
    Ok((
        y,
        BnCache {
            mode: BnMode::Eval,
            xhat,
            inv_std,
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
        },
    ))
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    gy.expect_shape("batch_norm_backward", cache.xhat.shape())?;
    let (n, c, h, w) = gy.dims4("batch_norm_backward")?;
    let hw = h * w;
    let (gyd, xh) = (gy.data(), cache.xhat.data());
    let mut gbeta = vec![T::zero(); c];
    let mut ggamma = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                gbeta[ch] += gyd[i];
                ggamma[ch] += gyd[i] * xh[i];
            }
        }
    }
    let gd = gamma.data();
    let gx = match cache.mode {
        BnMode::Eval => Tensor::from_fn(gy.shape(), |i| {
            let ch = (i / hw) % c;
            gyd[i] * gd[ch] * cache.inv_std[ch]
        }),
        BnMode::Train => {
            let mf = T::from_usize(n * hw).unwrap();
            Tensor::from_fn(gy.shape(), |i| {
                let ch = (i / hw) % c;
                gd[ch] * cache.inv_std[ch] / mf * (mf * gyd[i] - gbeta[ch] - xh[i] * ggamma[ch])
            })
        }
    };
    Ok((
        gx,
        Tensor::new(&[c], ggamma)?,
        Tensor::new(&[c], gbeta)?,
    ))
}

/// [`Differentiable`] adapter for train-mode normalisation: inputs `[x, gamma, beta]`.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormTrainOp {
    pub eps: f64,
}

impl<T: Scalar> Differentiable<T> for BatchNormTrainOp {
    fn name(&self) -> &str {
        "batch_norm_train"
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(batch_norm_train(&inputs[0], &inputs[1], &inputs[2], T::lit(self.eps))?.0)
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, cache) = batch_norm_train(&inputs[0], &inputs[1], &inputs[2], T::lit(self.eps))?;
        let (gx, gg, gb) = batch_norm_backward(&inputs[1], &cache, cot)?;
        Ok(vec![gx, gg, gb])
    }
}

/// Eval-mode adapter: inputs `[x, gamma, beta]`, running statistics fixed.
#[derive(Clone, Debug)]
pub struct BatchNormEvalOp<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> Differentiable<T> for BatchNormEvalOp<T> {
    fn name(&self) -> &str {
        "batch_norm_eval"
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let eps = T::lit(self.eps);
        Ok(batch_norm_eval(&inputs[0], &inputs[1], &inputs[2], &self.running_mean, &self.running_var, eps)?.0)
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let eps = T::lit(self.eps);
        let (_, cache) =
            batch_norm_eval(&inputs[0], &inputs[1], &inputs[2], &self.running_mean, &self.running_var, eps)?;
        let (gx, gg, gb) = batch_norm_backward(&inputs[1], &cache, cot)?;
        Ok(vec![gx, gg, gb])
    }
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Batch-norm layer with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: T::lit(momentum),
            eps: T::lit(eps),
            mode: BnMode::Train,
        }
    }

    /// Honors `self.mode`; train mode updates the running statistics with
    /// the unbiased batch variance.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        match self.mode {
            BnMode::Eval => self.forward_eval_cached(x),
            BnMode::Train => {
                let (y, cache) = batch_norm_train(x, &self.gamma.value, &self.beta.value, self.eps)?;
                let m = T::from_usize(x.len() / self.running_mean.len()).unwrap();
                let unbias = m / (m - T::one());
                let mom = self.momentum;
                let keep = T::one() - mom;
                for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
                    *r = keep * *r + mom * b;
                }
                for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
                    *r = keep * *r + mom * b * unbias;
                }
                Ok((y, cache))
            }
        }
    }

    fn forward_eval_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        batch_norm_eval(
            x,
            &self.gamma.value,
            &self.beta.value,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    /// Running-statistics forward; never mutates.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_eval_cached(x)?.0)
    }

    pub fn backward(&mut self, cache: &BnCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (gx, gg, gb) = batch_norm_backward(&self.gamma.value, cache, gy)?;
        self.gamma.grad.add_assign(&gg)?;
        self.beta.grad.add_assign(&gb)?;
        Ok(gx)
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        f(join(prefix, "gamma"), SlotRef::Param(&self.gamma));
        f(join(prefix, "beta"), SlotRef::Param(&self.beta));
        f(join(prefix, "running_mean"), SlotRef::Buffer(&self.running_mean));
        f(join(prefix, "running_var"), SlotRef::Buffer(&self.running_var));
    }
}
