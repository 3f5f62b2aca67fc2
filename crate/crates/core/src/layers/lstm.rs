//! Forget-gate LSTM cell without peepholes.
//!
//! Gate blocks are stacked along the leading axis of the weights in the
//! order input, forget, candidate, output:
//!
//! ```text
//! z = W x + U h_prev + b                 (W: [4H,D], U: [4H,H], b: [4H])
//! i = σ(z_i)  f = σ(z_f)  g = tanh(z_g)  o = σ(z_o)
//! c = f ⊙ c_prev + i ⊙ g
//! h = o ⊙ tanh(c)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::param::{join, Param, Parameterized, Slot, SlotRef};
use crate::numerics::linalg::{gemv, gemv_t, ger};
use crate::numerics::ops::sigmoid_scalar;
use crate::numerics::{Differentiable, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams<T> {
    pub w: Tensor<T>,
    pub u: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LstmCellParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w: Tensor::zeros(&[4 * hidden, input]),
            u: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// `U(-1/sqrt(H), 1/sqrt(H))` for every weight and bias.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w: Tensor::uniform(&[4 * hidden, input], bound, rng),
            u: Tensor::uniform(&[4 * hidden, hidden], bound, rng),
            b: Tensor::uniform(&[4 * hidden], bound, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w.shape()[1]
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let (g4, d) = self.w.dims2("lstm_cell.w")?;
        let (ug4, h) = self.u.dims2("lstm_cell.u")?;
        if h == 0 || g4 != 4 * h || ug4 != 4 * h {
            return Err(Error::shape("lstm_cell", self.w.shape(), self.u.shape()));
        }
        self.b.expect_shape("lstm_cell.b", &[4 * h])?;
        Ok((d, h))
    }
}

/// Activations saved for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmStep<T> {
    pub h: Vec<T>,
    pub c: Vec<T>,
    /// Post-activation gates `[i, f, g, o]`, each of length H.
    pub gates: Vec<T>,
    pub tanh_c: Vec<T>,
}

/// One recurrence step on raw slices.
pub fn lstm_cell_step<T: Scalar>(x: &[T], h_prev: &[T], c_prev: &[T], p: &LstmCellParams<T>) -> Result<LstmStep<T>> {
    let (d, h) = p.validate()?;
    if x.len() != d || h_prev.len() != h || c_prev.len() != h {
        return Err(Error::InvalidArgument(format!(
            "lstm_cell: expected x[{d}], h[{h}], c[{h}]; got x[{}], h[{}], c[{}]",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut z = p.b.data().to_vec();
    gemv(4 * h, d, p.w.data(), x, &mut z);
    gemv(4 * h, h, p.u.data(), h_prev, &mut z);
    for (k, v) in z.iter_mut().enumerate() {
        *v = if (2 * h..3 * h).contains(&k) {
            v.tanh()
        } else {
            sigmoid_scalar(*v)
        };
    }
    let mut c = vec![T::zero(); h];
    let mut tanh_c = vec![T::zero(); h];
    let mut hv = vec![T::zero(); h];
    for j in 0..h {
        let (i, f, g, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        hv[j] = o * tanh_c[j];
    }
    Ok(LstmStep {
        h: hv,
        c,
        gates: z,
        tanh_c,
    })
}

/// `x: [D]`, `h_prev: [H]`, `c_prev: [H]` → `(h_t, c_t)`.
pub fn lstm_cell<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    c_prev: &Tensor<T>,
    p: &LstmCellParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let step = lstm_cell_step(x.data(), h_prev.data(), c_prev.data(), p)?;
    let h = step.h.len();
    Ok((Tensor::new(&[h], step.h)?, Tensor::new(&[h], step.c)?))
}

pub struct LstmCellGrads<T> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
}

/// Backward through one step. Weight gradients are accumulated into `gp`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_backward<T: Scalar>(
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    p: &LstmCellParams<T>,
    step: &LstmStep<T>,
    gh: &[T],
    gc: &[T],
    gp: &mut LstmCellParams<T>,
) -> LstmCellGrads<T> {
    let h = p.hidden();
    let d = p.input();
    let z = &step.gates;
    let mut dz = vec![T::zero(); 4 * h];
    let mut gc_prev = vec![T::zero(); h];
    for j in 0..h {
        let (i, f, g, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
        let tc = step.tanh_c[j];
        let gct = gc[j] + gh[j] * o * (T::one() - tc * tc);
        let go = gh[j] * tc;
        dz[j] = gct * g * i * (T::one() - i);
        dz[h + j] = gct * c_prev[j] * f * (T::one() - f);
        dz[2 * h + j] = gct * i * (T::one() - g * g);
        dz[3 * h + j] = go * o * (T::one() - o);
        gc_prev[j] = gct * f;
    }
    ger(4 * h, d, &dz, x, gp.w.data_mut());
    ger(4 * h, h, &dz, h_prev, gp.u.data_mut());
    for (a, &v) in gp.b.data_mut().iter_mut().zip(&dz) {
        *a += v;
    }
    let mut gx = vec![T::zero(); d];
    gemv_t(4 * h, d, p.w.data(), &dz, &mut gx);
    let mut gh_prev = vec![T::zero(); h];
    gemv_t(4 * h, h, p.u.data(), &dz, &mut gh_prev);
    LstmCellGrads {
        x: gx,
        h_prev: gh_prev,
        c_prev: gc_prev,
    }
}

/// Inputs `[x, h_prev, c_prev, W, U, b]`; output `concat(h_t, c_t)` of length 2H.
#[derive(Clone, Copy, Debug)]
pub struct LstmCellOp;

fn params_from<T: Scalar>(inputs: &[Tensor<T>]) -> LstmCellParams<T> {
    LstmCellParams {
        w: inputs[3].clone(),
        u: inputs[4].clone(),
        b: inputs[5].clone(),
    }
}

impl<T: Scalar> Differentiable<T> for LstmCellOp {
    fn name(&self) -> &str {
        "lstm_cell"
    }

    fn forward(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let p = params_from(inputs);
        let s = lstm_cell_step(inputs[0].data(), inputs[1].data(), inputs[2].data(), &p)?;
        let mut out = s.h;
        out.extend(s.c);
        let n = out.len();
        Tensor::new(&[n], out)
    }

    fn backward(&self, inputs: &[Tensor<T>], _: &Tensor<T>, cot: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let p = params_from(inputs);
        let h = p.hidden();
        let (x, hp, cp) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let s = lstm_cell_step(x, hp, cp, &p)?;
        let mut gp = LstmCellParams::zeros(p.input(), h);
        let g = lstm_cell_backward(x, hp, cp, &p, &s, &cot.data()[..h], &cot.data()[h..], &mut gp);
        Ok(vec![
            Tensor::new(inputs[0].shape(), g.x)?,
            Tensor::new(&[h], g.h_prev)?,
            Tensor::new(&[h], g.c_prev)?,
            gp.w,
            gp.u,
            gp.b,
        ])
    }
}

/// Trainable cell parameters with gradients.
#[derive(Clone, Debug)]
pub struct LstmCell<T> {
    pub w: Param<T>,
    pub u: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> LstmCell<T> {
    pub fn from_params(p: LstmCellParams<T>) -> Self {
        Self {
            w: Param::new(p.w),
            u: Param::new(p.u),
            b: Param::new(p.b),
        }
    }

    pub fn params(&self) -> LstmCellParams<T> {
        LstmCellParams {
            w: self.w.value.clone(),
            u: self.u.value.clone(),
            b: self.b.value.clone(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for LstmCell<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "w_ih"), Slot::Param(&mut self.w));
        f(join(prefix, "w_hh"), Slot::Param(&mut self.u));
        f(join(prefix, "bias"), Slot::Param(&mut self.b));
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        f(join(prefix, "w_ih"), SlotRef::Param(&self.w));
        f(join(prefix, "w_hh"), SlotRef::Param(&self.u));
        f(join(prefix, "bias"), SlotRef::Param(&self.b));
    }
}
