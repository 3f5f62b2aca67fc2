//! Windowed, global and channel-wise pooling.
//!
//! Max pooling routes the cotangent to the first maximal element in
//! row-major order.

use crate::error::{Error, Result};
use crate::layers::conv::conv_out_size;
use crate::numerics::{Differentiable, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolWindow {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    /// Max pooling ignores padded cells; average pooling counts them as zeros.
    pub padding: usize,
}

struct PoolGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn pool_geometry<T: Scalar>(x: &Tensor<T>, win: PoolWindow) -> Result<PoolGeom> {
    let (n, c, h, w) = x.dims4("pool2d")?;
    if win.padding >= win.kh.max(1) || win.padding >= win.kw.max(1) {
        return Err(Error::InvalidArgument(format!(
            "pool2d: padding {} must be smaller than the window {}x{}",
            win.padding, win.kh, win.kw
        )));
    }
    match (
        conv_out_size(h, win.kh, win.stride, win.padding),
        conv_out_size(w, win.kw, win.stride, win.padding),
    ) {
        (Some(ho), Some(wo)) => Ok(PoolGeom { n, c, h, w, ho, wo }),
        _ => Err(Error::InvalidArgument(format!(
            "pool2d: window {}x{} larger than padded input {}x{}",
            win.kh,
            win.kw,
            h + 2 * win.padding,
            w + 2 * win.padding
        ))),
    }
}

/// Visits the in-bounds input cells of output cell `(oh, ow)`.
fn window_cells(g: &PoolGeom, win: PoolWindow, oh: usize, ow: usize, mut f: impl FnMut(usize)) {
    for i in 0..win.kh {
        let ih = (oh * win.stride + i) as isize - win.padding as isize;
        if ih < 0 || ih >= g.h as isize {
            continue;
        }
        for j in 0..win.kw {
            let iw = (ow * win.stride + j) as isize - win.padding as isize;
            if iw >= 0 && iw < g.w as isize {
                f(ih as usize * g.w + iw as usize);
            }
        }
    }
}

fn argmax_in_window<T: Scalar>(plane: &[T], g: &PoolGeom, win: PoolWindow, oh: usize, ow: usize) -> usize {
    let mut best: Option<(usize, T)> = None;
    window_cells(g, win, oh, ow, |idx| {
        if best.is_none_or(|(_, b)| plane[idx] > b) {
            best = Some((idx, plane[idx]));
        }
    });
    best.expect("window has at least one in-bounds cell").0
}

pub fn pool2d<T: Scalar>(x: &Tensor<T>, kind: PoolKind, win: PoolWindow) -> Result<Tensor<T>> {
    let g = pool_geometry(x, win)?;
    let area = T::from_usize(win.kh * win.kw).unwrap();
    let hw = g.h * g.w;
    let mut out = Tensor::zeros(&[g.n, g.c, g.ho, g.wo]);
    let od = out.data_mut();
    for plane_idx in 0..g.n * g.c {
        let plane = &x.data()[plane_idx * hw..(plane_idx + 1) * hw];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                od[(plane_idx * g.ho + oh) * g.wo + ow] = match kind {
                    PoolKind::Max => plane[argmax_in_window(plane, &g, win, oh, ow)],
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        window_cells(&g, win, oh, ow, |idx| s += plane[idx]);
                        s / area
                    }
                };
            }
        }
    }
    Ok(out)
}

pub fn pool2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    win: PoolWindow,
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = pool_geometry(x, win)?;
    gy.expect_shape("pool2d_backward", &[g.n, g.c, g.ho, g.wo])?;
    let area = T::from_usize(win.kh * win.kw).unwrap();
    let hw = g.h * g.w;
    let mut gx = Tensor::zeros(x.shape());
    for plane_idx in 0..g.n * g.c {
        let plane = &x.data()[plane_idx * hw..(plane_idx + 1) * hw];
        let gplane = &mut gx.data_mut()[plane_idx * hw..(plane_idx + 1) * hw];
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let gv = gy.data()[(plane_idx * g.ho + oh) * g.wo + ow];
                match kind {
                    PoolKind::Max => gplane[argmax_in_window(plane, &g, win, oh, ow)] += gv,
                    PoolKind::Avg => window_cells(&g, win, oh, ow, |idx| gplane[idx] += gv / area),
                }
            }
        }
    }
    Ok(gx)
}

/// First index of the maximum of `vals` taken with a stride.
fn strided_argmax<T: Scalar>(vals: &[T], start: usize, count: usize, step: usize) -> usize {
    let mut best = start;
    for k in 1..count {
        let idx = start + k * step;
        if vals[idx] > vals[best] {
            best = idx;
        }
    }
    best
}

/// Reduces `[N,C,H,W]` to `[N,C,1,1]`.
pub fn global_pool<T: Scalar>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_pool")?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::InvalidArgument("global_pool over empty spatial extent".into()));
    }
    let xd = x.data();
    let hwf = T::from_usize(hw).unwrap();
    Ok(Tensor::from_fn(&[n, c, 1, 1], |p| {
        let plane = &xd[p * hw..(p + 1) * hw];
        match kind {
            PoolKind::Avg => plane.iter().copied().sum::<T>() / hwf,
            PoolKind::Max => xd[strided_argmax(xd, p * hw, hw, 1)],
        }
    }))
}

pub fn global_pool_backward<T: Scalar>(x: &Tensor<T>, kind: PoolKind, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_pool_backward")?;
    gy.expect_shape("global_pool_backward", &[n, c, 1, 1])?;
    let hw = h * w;
    let hwf = T::from_usize(hw).unwrap();
    let mut gx = Tensor::zeros(x.shape());
    for p in 0..n * c {
        let gv = gy.data()[p];
        match kind {
            PoolKind::Avg => gx.data_mut()[p * hw..(p + 1) * hw]
                .iter_mut()
                .for_each(|v| *v = gv / hwf),
            PoolKind::Max => gx.data_mut()[strided_argmax(x.data(), p * hw, hw, 1)] = gv,
        }
    }
    Ok(gx)
}

/// Reduces `[N,C,H,W]` over channels to `[N,1,H,W]`.
pub fn channel_pool<T: Scalar>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("channel_pool")?;
    if c == 0 {
        return Err(Error::InvalidArgument("channel_pool over zero channels".into()));
    }
    let hw = h * w;
    let xd = x.data();
    let cf = T::from_usize(c).unwrap();
    Ok(Tensor::from_fn(&[n, 1, h, w], |i| {
        let (s, px) = (i / hw, i % hw);
        let start = s * c * hw + px;
        match kind {
            PoolKind::Avg => (0..c).map(|ch| xd[start + ch * hw]).sum::<T>() / cf,
            PoolKind::Max => xd[strided_argmax(xd, start, c, hw)],
        }
    }))
}

pub fn channel_pool_backward<T: Scalar>(x: &Tensor<T>, kind: PoolKind, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("channel_pool_backward")?;
    gy.expect_shape("channel_pool_backward", &[n, 1, h, w])?;
    let hw = h * w;
    let cf = T::from_usize(c).unwrap();
    let mut gx = Tensor::zeros(x.shape());
    for i in 0..n * hw {
        let (s, px) = (i / hw, i % hw);
        let start = s * c * hw + px;
        let gv = gy.data()[i];
        match kind {
            PoolKind::Avg => (0..c).for_each(|ch| gx.data_mut()[start + ch * hw] = gv / cf),
            PoolKind::Max => gx.data_mut()[strided_argmax(x.data(), start, c, hw)] = gv,
        }
    }
    Ok(gx)
}

#[derive(Clone, Copy, Debug)]
pub struct Pool2dOp {
    pub kind: PoolKind,
    pub window: PoolWindow,
}

impl<T: Scalar> Differentiable<T> for Pool2dOp {
    fn name(&self) -> &str {
        "pool2d"
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        pool2d(&inputs[0], self.kind, self.window)
    }
    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![pool2d_backward(&inputs[0], self.kind, self.window, cot)?])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalPoolOp(pub PoolKind);

impl<T: Scalar> Differentiable<T> for GlobalPoolOp {
    fn name(&self) -> &str {
        "global_pool"
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        global_pool(&inputs[0], self.0)
    }
    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![global_pool_backward(&inputs[0], self.0, cot)?])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelPoolOp(pub PoolKind);

impl<T: Scalar> Differentiable<T> for ChannelPoolOp {
    fn name(&self) -> &str {
        "channel_pool"
    }
    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        channel_pool(&inputs[0], self.0)
    }
    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(vec![channel_pool_backward(&inputs[0], self.0, cot)?])
    }
}
