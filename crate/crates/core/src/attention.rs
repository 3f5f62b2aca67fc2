//! Convolutional block attention: channel attention followed by spatial
//! attention, each a sigmoid-bounded multiplicative mask.
//!
//! ```text
//! Mc  = σ( MLP(avg_hw F) + MLP(max_hw F) )        MLP(v) = W1 relu(W0 v)
//! F'  = Mc ⊙ F
//! Ms  = σ( conv_kxk([avg_c F'; max_c F']) + b )
//! F'' = Ms ⊙ F'
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::conv::{conv2d, conv2d_backward};
use crate::layers::dense::{dense, dense_backward};
use crate::layers::param::{join, Param, Parameterized, Slot, SlotRef};
use crate::layers::pool::{
    channel_pool, channel_pool_backward, global_pool, global_pool_backward, PoolKind,
};
use crate::numerics::ops::{elementwise, elementwise_backward, relu, sigmoid, Elementwise};
use crate::numerics::{Differentiable, Tensor};
use crate::scalar::Scalar;

pub const DEFAULT_REDUCTION: usize = 16;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

/// Attention parameters for a feature map with `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct CbamParams<T> {
    pub reduction: usize,
    /// `[C/r, C]`
    pub w0: Tensor<T>,
    /// `[C, C/r]`
    pub w1: Tensor<T>,
    /// `[1, 2, k, k]`, odd `k`
    pub spatial_kernel: Tensor<T>,
    /// `[1]`
    pub spatial_bias: Tensor<T>,
}

impl<T: Scalar> CbamParams<T> {
    fn check_ratio(channels: usize, reduction: usize) -> Result<()> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "cbam: reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        Ok(())
    }

    fn check_kernel(kernel: usize) -> Result<()> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "cbam: spatial kernel size {kernel} must be odd"
            )));
        }
        Ok(())
    }

    pub fn zeros(channels: usize, reduction: usize, kernel: usize) -> Result<Self> {
        Self::check_ratio(channels, reduction)?;
        Self::check_kernel(kernel)?;
        let hidden = channels / reduction;
        Ok(Self {
            reduction,
            w0: Tensor::zeros(&[hidden, channels]),
            w1: Tensor::zeros(&[channels, hidden]),
            spatial_kernel: Tensor::zeros(&[1, 2, kernel, kernel]),
            spatial_bias: Tensor::zeros(&[1]),
        })
    }

    /// He-normal MLP and spatial kernel, zero spatial bias.
    pub fn random<R: Rng + ?Sized>(channels: usize, reduction: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction, kernel)?;
        let hidden = channels / reduction;
        p.w0 = Tensor::randn(&[hidden, channels], (2.0 / channels as f64).sqrt(), rng);
        p.w1 = Tensor::randn(&[channels, hidden], (2.0 / hidden as f64).sqrt(), rng);
        let fan = (2 * kernel * kernel) as f64;
        p.spatial_kernel = Tensor::randn(&[1, 2, kernel, kernel], (2.0 / fan).sqrt(), rng);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w0.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.spatial_kernel.shape()[2]
    }

    fn validate(&self, f: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = f.dims4("cbam")?;
        Self::check_ratio(c, self.reduction)?;
        let hidden = c / self.reduction;
        self.w0.expect_shape("cbam.w0", &[hidden, c])?;
        self.w1.expect_shape("cbam.w1", &[c, hidden])?;
        let k = self.kernel_size();
        Self::check_kernel(k)?;
        self.spatial_kernel.expect_shape("cbam.spatial_kernel", &[1, 2, k, k])?;
        self.spatial_bias.expect_shape("cbam.spatial_bias", &[1])?;
        Ok(())
    }
}

/// Forward intermediates of [`channel_attention`].
#[derive(Clone, Debug)]
struct ChannelCache<T> {
    pooled: [Tensor<T>; 2],
    hidden_pre: [Tensor<T>; 2],
    hidden: [Tensor<T>; 2],
    mask: Tensor<T>,
}

const POOLS: [PoolKind; 2] = [PoolKind::Avg, PoolKind::Max];

fn channel_forward<T: Scalar>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<ChannelCache<T>> {
    p.validate(f)?;
    let (n, c, _, _) = f.dims4("channel_attention")?;
    let mut logits = Tensor::zeros(&[n, c]);
    let mut pooled = Vec::with_capacity(2);
    let mut hidden_pre = Vec::with_capacity(2);
    let mut hidden = Vec::with_capacity(2);
    for kind in POOLS {
        let v = global_pool(f, kind)?.reshape(&[n, c])?;
        let a = dense(&v, &p.w0, None)?;
        let r = relu(&a);
        logits.add_assign(&dense(&r, &p.w1, None)?)?;
        pooled.push(v);
        hidden_pre.push(a);
        hidden.push(r);
    }
    let mask = sigmoid(&logits).reshape(&[n, c, 1, 1])?;
    let arr = |v: Vec<Tensor<T>>| -> [Tensor<T>; 2] { v.try_into().expect("two pooled branches") };
    Ok(ChannelCache {
        pooled: arr(pooled),
        hidden_pre: arr(hidden_pre),
        hidden: arr(hidden),
        mask,
    })
}

/// `Mc: [N,C,1,1]`, every element in (0, 1).
pub fn channel_attention<T: Scalar>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<Tensor<T>> {
    Ok(channel_forward(f, p)?.mask)
}

/// Returns `(gF, gW0, gW1)` for a cotangent on `Mc`.
fn channel_backward<T: Scalar>(
    f: &Tensor<T>,
    p: &CbamParams<T>,
    cache: &ChannelCache<T>,
    g_mask: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, _, _) = f.dims4("channel_attention_backward")?;
    let m = cache.mask.data();
    let g_logits = Tensor::from_fn(&[n, c], |i| g_mask.data()[i] * m[i] * (T::one() - m[i]));
    let mut gf = Tensor::zeros(f.shape());
    let mut gw0 = Tensor::zeros(p.w0.shape());
    let mut gw1 = Tensor::zeros(p.w1.shape());
    for (b, kind) in POOLS.into_iter().enumerate() {
        let (g_hidden, g1, _) = dense_backward(&cache.hidden[b], &p.w1, false, &g_logits)?;
        gw1.add_assign(&g1)?;
        let (g_pre, _) = elementwise_backward(
            Elementwise::Relu,
            &cache.hidden_pre[b],
            None,
            &cache.hidden[b],
            &g_hidden,
        )?;
        let (g_pooled, g0, _) = dense_backward(&cache.pooled[b], &p.w0, false, &g_pre)?;
        gw0.add_assign(&g0)?;
        gf.add_assign(&global_pool_backward(f, kind, &g_pooled.reshape(&[n, c, 1, 1])?)?)?;
    }
    Ok((gf, gw0, gw1))
}

#[derive(Clone, Debug)]
struct SpatialCache<T> {
    stacked: Tensor<T>,
    mask: Tensor<T>,
}

fn spatial_forward<T: Scalar>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<SpatialCache<T>> {
    p.validate(f)?;
    let stacked = stack_channel_pools(f)?;
    let pad = (p.kernel_size() - 1) / 2;
    let logits = conv2d(&stacked, &p.spatial_kernel, Some(&p.spatial_bias), 1, pad)?;
    Ok(SpatialCache {
        stacked,
        mask: sigmoid(&logits),
    })
}

/// `[avg_c F; max_c F]` as a `[N,2,H,W]` map.
fn stack_channel_pools<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _, h, w) = f.dims4("spatial_attention")?;
    let avg = channel_pool(f, PoolKind::Avg)?;
    let max = channel_pool(f, PoolKind::Max)?;
    let hw = h * w;
    let mut data = Vec::with_capacity(2 * n * hw);
    for s in 0..n {
        data.extend_from_slice(&avg.data()[s * hw..(s + 1) * hw]);
        data.extend_from_slice(&max.data()[s * hw..(s + 1) * hw]);
    }
    Tensor::new(&[n, 2, h, w], data)
}

/// `Ms: [N,1,H,W]`, every element in (0, 1).
pub fn spatial_attention<T: Scalar>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<Tensor<T>> {
    Ok(spatial_forward(f, p)?.mask)
}

/// Returns `(gF, g_kernel, g_bias)` for a cotangent on `Ms`.
fn spatial_backward<T: Scalar>(
    f: &Tensor<T>,
    p: &CbamParams<T>,
    cache: &SpatialCache<T>,
    g_mask: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, _, h, w) = f.dims4("spatial_attention_backward")?;
    let m = cache.mask.data();
    let g_logits = Tensor::from_fn(cache.mask.shape(), |i| g_mask.data()[i] * m[i] * (T::one() - m[i]));
    let pad = (p.kernel_size() - 1) / 2;
    let g = conv2d_backward(&cache.stacked, &p.spatial_kernel, true, 1, pad, &g_logits)?;
    let hw = h * w;
    let split = |offset: usize| -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(n * hw);
        for s in 0..n {
            let base = (2 * s + offset) * hw;
            data.extend_from_slice(&g.input.data()[base..base + hw]);
        }
        Tensor::new(&[n, 1, h, w], data)
    };
    let mut gf = channel_pool_backward(f, PoolKind::Avg, &split(0)?)?;
    gf.add_assign(&channel_pool_backward(f, PoolKind::Max, &split(1)?)?)?;
    Ok((gf, g.kernel, g.bias.expect("spatial conv has a bias")))
}

/// Intermediates of a full [`cbam`] forward pass.
#[derive(Clone, Debug)]
pub struct CbamCache<T> {
    channel: ChannelCache<T>,
    /// `F' = Mc ⊙ F`
    refined: Tensor<T>,
    spatial: SpatialCache<T>,
    output: Tensor<T>,
}

impl<T> CbamCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn channel_mask(&self) -> &Tensor<T> {
        &self.channel.mask
    }

    pub fn spatial_mask(&self) -> &Tensor<T> {
        &self.spatial.mask
    }
}

pub fn cbam_forward<T: Scalar>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<CbamCache<T>> {
    let channel = channel_forward(f, p)?;
    let refined = elementwise(Elementwise::Mul, f, Some(&channel.mask))?;
    let spatial = spatial_forward(&refined, p)?;
    let output = elementwise(Elementwise::Mul, &refined, Some(&spatial.mask))?;
    Ok(CbamCache {
        channel,
        refined,
        spatial,
        output,
    })
}

/// Channel then spatial refinement; output shape equals input shape.
pub fn cbam<T: Scalar>(f: &Tensor<T>, p: &CbamParams<T>) -> Result<Tensor<T>> {
    Ok(cbam_forward(f, p)?.output)
}

/// Cotangents of every [`CbamParams`] tensor.
#[derive(Clone, Debug)]
pub struct CbamGrads<T> {
    pub w0: Tensor<T>,
    pub w1: Tensor<T>,
    pub spatial_kernel: Tensor<T>,
    pub spatial_bias: Tensor<T>,
}

pub fn cbam_backward<T: Scalar>(
    f: &Tensor<T>,
    p: &CbamParams<T>,
    cache: &CbamCache<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, CbamGrads<T>)> {
    gy.expect_shape("cbam_backward", f.shape())?;
    let (g_refined, g_ms) = elementwise_backward(
        Elementwise::Mul,
        &cache.refined,
        Some(&cache.spatial.mask),
        &cache.output,
        gy,
    )?;
    let (g_refined_via_ms, gk, gb) = spatial_backward(&cache.refined, p, &cache.spatial, &g_ms.expect("binary"))?;
    let mut g_refined = g_refined;
    g_refined.add_assign(&g_refined_via_ms)?;

    let (mut gf, g_mc) =
        elementwise_backward(Elementwise::Mul, f, Some(&cache.channel.mask), &cache.refined, &g_refined)?;
    let (gf_via_mc, gw0, gw1) = channel_backward(f, p, &cache.channel, &g_mc.expect("binary"))?;
    gf.add_assign(&gf_via_mc)?;
    Ok((
        gf,
        CbamGrads {
            w0: gw0,
            w1: gw1,
            spatial_kernel: gk,
            spatial_bias: gb,
        },
    ))
}

fn params_from<T: Scalar>(reduction: usize, inputs: &[Tensor<T>]) -> CbamParams<T> {
    CbamParams {
        reduction,
        w0: inputs[1].clone(),
        w1: inputs[2].clone(),
        spatial_kernel: inputs[3].clone(),
        spatial_bias: inputs[4].clone(),
    }
}

/// Inputs `[F, W0, W1, spatial_kernel, spatial_bias]`.
#[derive(Clone, Copy, Debug)]
pub struct CbamOp {
    pub reduction: usize,
}

impl<T: Scalar> Differentiable<T> for CbamOp {
    fn name(&self) -> &str {
        "cbam"
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        cbam(&inputs[0], &params_from(self.reduction, inputs))
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let p = params_from(self.reduction, inputs);
        let cache = cbam_forward(&inputs[0], &p)?;
        let (gf, g) = cbam_backward(&inputs[0], &p, &cache, cot)?;
        Ok(vec![gf, g.w0, g.w1, g.spatial_kernel, g.spatial_bias])
    }
}

/// Inputs `[F, W0, W1, spatial_kernel, spatial_bias]`; output `Mc`.
/// The spatial tensors receive zero cotangents.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionOp {
    pub reduction: usize,
}

impl<T: Scalar> Differentiable<T> for ChannelAttentionOp {
    fn name(&self) -> &str {
        "channel_attention"
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        channel_attention(&inputs[0], &params_from(self.reduction, inputs))
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let p = params_from(self.reduction, inputs);
        let cache = channel_forward(&inputs[0], &p)?;
        let (gf, gw0, gw1) = channel_backward(&inputs[0], &p, &cache, cot)?;
        Ok(vec![
            gf,
            gw0,
            gw1,
            Tensor::zeros(inputs[3].shape()),
            Tensor::zeros(inputs[4].shape()),
        ])
    }
}

/// Inputs `[F, W0, W1, spatial_kernel, spatial_bias]`; output `Ms`.
/// The MLP tensors receive zero cotangents.
#[derive(Clone, Copy, Debug)]
pub struct SpatialAttentionOp {
    pub reduction: usize,
}

impl<T: Scalar> Differentiable<T> for SpatialAttentionOp {
    fn name(&self) -> &str {
        "spatial_attention"
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        spatial_attention(&inputs[0], &params_from(self.reduction, inputs))
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let p = params_from(self.reduction, inputs);
        let cache = spatial_forward(&inputs[0], &p)?;
        let (gf, gk, gb) = spatial_backward(&inputs[0], &p, &cache, cot)?;
        Ok(vec![
            gf,
            Tensor::zeros(inputs[1].shape()),
            Tensor::zeros(inputs[2].shape()),
            gk,
            gb,
        ])
    }
}

/// Attention layer with trainable parameters.
#[derive(Clone, Debug)]
pub struct Cbam<T> {
    pub reduction: usize,
    pub w0: Param<T>,
    pub w1: Param<T>,
    pub spatial_kernel: Param<T>,
    pub spatial_bias: Param<T>,
}

impl<T: Scalar> Cbam<T> {
    pub fn from_params(p: CbamParams<T>) -> Self {
        Self {
            reduction: p.reduction,
            w0: Param::new(p.w0),
            w1: Param::new(p.w1),
            spatial_kernel: Param::new(p.spatial_kernel),
            spatial_bias: Param::new(p.spatial_bias),
        }
    }

    pub fn params(&self) -> CbamParams<T> {
        CbamParams {
            reduction: self.reduction,
            w0: self.w0.value.clone(),
            w1: self.w1.value.clone(),
            spatial_kernel: self.spatial_kernel.value.clone(),
            spatial_bias: self.spatial_bias.value.clone(),
        }
    }

    pub fn forward(&self, f: &Tensor<T>) -> Result<CbamCache<T>> {
        cbam_forward(f, &self.params())
    }

    pub fn backward(&mut self, f: &Tensor<T>, cache: &CbamCache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let (gf, g) = cbam_backward(f, &self.params(), cache, gy)?;
        self.w0.grad.add_assign(&g.w0)?;
        self.w1.grad.add_assign(&g.w1)?;
        self.spatial_kernel.grad.add_assign(&g.spatial_kernel)?;
        self.spatial_bias.grad.add_assign(&g.spatial_bias)?;
        Ok(gf)
    }
}

impl<T: Scalar> Parameterized<T> for Cbam<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "mlp.0.weight"), Slot::Param(&mut self.w0));
        f(join(prefix, "mlp.1.weight"), Slot::Param(&mut self.w1));
        f(join(prefix, "spatial.weight"), Slot::Param(&mut self.spatial_kernel));
        f(join(prefix, "spatial.bias"), Slot::Param(&mut self.spatial_bias));
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        f(join(prefix, "mlp.0.weight"), SlotRef::Param(&self.w0));
        f(join(prefix, "mlp.1.weight"), SlotRef::Param(&self.w1));
        f(join(prefix, "spatial.weight"), SlotRef::Param(&self.spatial_kernel));
        f(join(prefix, "spatial.bias"), SlotRef::Param(&self.spatial_bias));
    }
}
