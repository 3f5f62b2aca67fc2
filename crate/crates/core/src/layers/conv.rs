//! 2-D cross-correlation via im2col + GEMM.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::param::{join, Param, Parameterized, Slot, SlotRef};
use crate::numerics::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{Differentiable, Tensor};
use crate::scalar::Scalar;

/// Output extent of a strided window over a zero-padded axis.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn geometry<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, Geometry)> {
    let (n, cin, h, w) = x.dims4("conv2d")?;
    let (cout, kcin, kh, kw) = kernel.dims4("conv2d")?;
    if kcin != cin {
        return Err(Error::shape("conv2d", x.shape(), kernel.shape()));
    }
    let (ho, wo) = match (
        conv_out_size(h, kh, stride, padding),
        conv_out_size(w, kw, stride, padding),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} padding {padding} gives no output for input {h}x{w}"
            )))
        }
    };
    Ok((
        n,
        cout,
        Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride,
            padding,
        },
    ))
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((ci * g.kh + i) * g.kw + j) * p;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + i) as isize - g.padding as isize;
                    let dst = &mut cols[row + oh * g.wo..row + (oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + ih as usize) * g.w..(ci * g.h + ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.padding as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], gx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((ci * g.kh + i) * g.kw + j) * p;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + i) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + ih as usize) * g.w;
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + j) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.w as isize {
                            gx[base + iw as usize] += cols[row + oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N,Cin,H,W]`, `kernel: [Cout,Cin,kh,kw]`, `bias: [Cout]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = geometry(x, kernel, stride, padding)?;
    if let Some(b) = bias {
        b.expect_shape("conv2d.bias", &[cout])?;
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    let mut cols = vec![T::zero(); k * p];
    let od = out.data_mut();
    for s in 0..n {
        im2col(&g, &x.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        let dst = &mut od[s * cout * p..(s + 1) * cout * p];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm_nn(cout, k, p, kernel.data(), &cols, dst);
    }
    Ok(out)
}

pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    padding: usize,
    gy: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (n, cout, g) = geometry(x, kernel, stride, padding)?;
    gy.expect_shape("conv2d_backward", &[n, cout, g.ho, g.wo])?;
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let mut gb = with_bias.then(|| Tensor::zeros(&[cout]));
    let mut cols = vec![T::zero(); k * p];
    let mut gcols = vec![T::zero(); k * p];
    for s in 0..n {
        let gys = &gy.data()[s * cout * p..(s + 1) * cout * p];
        im2col(&g, &x.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        gemm_nt(cout, p, k, gys, &cols, gk.data_mut());
        gcols.fill(T::zero());
        gemm_tn(k, cout, p, kernel.data(), gys, &mut gcols);
        col2im(&g, &gcols, &mut gx.data_mut()[s * in_stride..(s + 1) * in_stride]);
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in gys.chunks(p).enumerate() {
                gb.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    Ok(Conv2dGrads {
        input: gx,
        kernel: gk,
        bias: gb,
    })
}

/// [`Differentiable`] adapter: inputs `[x, kernel]` or `[x, kernel, bias]`.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Differentiable<T> for Conv2dOp {
    fn name(&self) -> &str {
        "conv2d"
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        conv2d(&inputs[0], &inputs[1], inputs.get(2), self.stride, self.padding)
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let g = conv2d_backward(&inputs[0], &inputs[1], inputs.len() > 2, self.stride, self.padding, cot)?;
        Ok([g.input, g.kernel].into_iter().chain(g.bias).collect())
    }
}

/// Convolution layer with owned parameters.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialisation: `std = sqrt(2 / fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = Tensor::randn(&[cout, cin, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Self {
            weight: Param::new(weight),
            bias: with_bias.then(|| Param::new(Tensor::zeros(&[cout]))),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            self.stride,
            self.padding,
        )
    }

    /// Accumulates parameter gradients and returns the input cotangent.
    pub fn backward(&mut self, x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = conv2d_backward(x, &self.weight.value, self.bias.is_some(), self.stride, self.padding, gy)?;
        self.weight.grad.add_assign(&g.kernel)?;
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), g.bias) {
            b.grad.add_assign(&gb)?;
        }
        Ok(g.input)
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
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
