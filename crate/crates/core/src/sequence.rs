//! Bidirectional LSTM over a clip plus the per-timestep classification head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::dense::Dense;
use crate::layers::lstm::{lstm_cell_backward, lstm_cell_step, LstmCell, LstmCellParams, LstmStep};
use crate::layers::param::{join, Parameterized, Slot, SlotRef};
use crate::numerics::ops::{elementwise_backward, relu, Elementwise};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// The seven basic expressions, in label order.
pub const NUM_CLASSES: usize = 7;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceConfig {
    pub input_dim: usize,
    /// Hidden units per direction.
    pub hidden_size: usize,
    /// Width of the hidden head layer; 0 means a single linear layer.
    pub head_hidden: usize,
}

impl SequenceConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_size: 128,
            head_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_size == 0 {
            return Err(Error::Config(format!(
                "sequence input_dim ({}) and hidden_size ({}) must be positive",
                self.input_dim, self.hidden_size
            )));
        }
        Ok(())
    }
}

/// Per-timestep states of both directions, indexed by time.
#[derive(Clone, Debug)]
pub struct BlstmCache<T> {
    seq: Tensor<T>,
    forward: Vec<LstmStep<T>>,
    backward: Vec<LstmStep<T>>,
}

/// Runs one direction over `seq`; `order` lists the time indices in
/// processing order. Returned steps are indexed by time.
fn run_direction<T: Scalar>(
    seq: &Tensor<T>,
    p: &LstmCellParams<T>,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Option<LstmStep<T>>>> {
    let (t_len, d) = seq.dims2("blstm")?;
    let h = p.hidden();
    let mut steps: Vec<Option<LstmStep<T>>> = vec![None; t_len];
    let mut h_prev = vec![T::zero(); h];
    let mut c_prev = vec![T::zero(); h];
    for t in order {
        let step = lstm_cell_step(&seq.data()[t * d..(t + 1) * d], &h_prev, &c_prev, p)?;
        h_prev.clone_from(&step.h);
        c_prev.clone_from(&step.c);
        steps[t] = Some(step);
    }
    Ok(steps)
}

/// `seq: [T,D]` → `[T,2H]`. Row `t` is the forward state after frames
/// `0..=t` followed by the backward state after frames `T-1..=t`.
/// Both directions start from zero state.
pub fn blstm_forward<T: Scalar>(
    seq: &Tensor<T>,
    fwd: &LstmCellParams<T>,
    bwd: &LstmCellParams<T>,
) -> Result<(Tensor<T>, BlstmCache<T>)> {
    let (t_len, d) = seq.dims2("blstm")?;
    if t_len == 0 {
        return Err(Error::InvalidArgument("blstm over an empty sequence".into()));
    }
    if fwd.input() != d || bwd.input() != d || fwd.hidden() != bwd.hidden() {
        return Err(Error::shape("blstm", seq.shape(), fwd.w.shape()));
    }
    let h = fwd.hidden();
    let f: Vec<LstmStep<T>> = run_direction(seq, fwd, 0..t_len)?.into_iter().map(Option::unwrap).collect();
    let b: Vec<LstmStep<T>> = run_direction(seq, bwd, (0..t_len).rev())?
        .into_iter()
        .map(Option::unwrap)
        .collect();
    let mut out = Vec::with_capacity(t_len * 2 * h);
    for t in 0..t_len {
        out.extend_from_slice(&f[t].h);
        out.extend_from_slice(&b[t].h);
    }
    Ok((
        Tensor::new(&[t_len, 2 * h], out)?,
        BlstmCache {
            seq: seq.clone(),
            forward: f,
            backward: b,
        },
    ))
}

/// Backpropagation through time for both directions. Weight gradients are
/// accumulated into `g_fwd` / `g_bwd`; returns the cotangent of `seq`.
pub fn blstm_backward<T: Scalar>(
    fwd: &LstmCellParams<T>,
    bwd: &LstmCellParams<T>,
    cache: &BlstmCache<T>,
    g_out: &Tensor<T>,
    g_fwd: &mut LstmCellParams<T>,
    g_bwd: &mut LstmCellParams<T>,
) -> Result<Tensor<T>> {
    let (t_len, d) = cache.seq.dims2("blstm_backward")?;
    let h = fwd.hidden();
    g_out.expect_shape("blstm_backward", &[t_len, 2 * h])?;
    let mut g_seq = Tensor::zeros(&[t_len, d]);
    let zeros = vec![T::zero(); h];
    let x = |t: usize| &cache.seq.data()[t * d..(t + 1) * d];

    let mut gh_next = vec![T::zero(); h];
    let mut gc_next = vec![T::zero(); h];
    for t in (0..t_len).rev() {
        let (hp, cp) = if t > 0 {
            (&cache.forward[t - 1].h, &cache.forward[t - 1].c)
        } else {
            (&zeros, &zeros)
        };
        let gh: Vec<T> = g_out.data()[t * 2 * h..t * 2 * h + h]
            .iter()
            .zip(&gh_next)
            .map(|(&a, &b)| a + b)
            .collect();
        let g = lstm_cell_backward(x(t), hp, cp, fwd, &cache.forward[t], &gh, &gc_next, g_fwd);
        for (a, v) in g_seq.data_mut()[t * d..(t + 1) * d].iter_mut().zip(g.x) {
            *a += v;
        }
        gh_next = g.h_prev;
        gc_next = g.c_prev;
    }

    gh_next.fill(T::zero());
    gc_next.fill(T::zero());
    for t in 0..t_len {
        let (hp, cp) = if t + 1 < t_len {
            (&cache.backward[t + 1].h, &cache.backward[t + 1].c)
        } else {
            (&zeros, &zeros)
        };
        let gh: Vec<T> = g_out.data()[t * 2 * h + h..(t + 1) * 2 * h]
            .iter()
            .zip(&gh_next)
            .map(|(&a, &b)| a + b)
            .collect();
        let g = lstm_cell_backward(x(t), hp, cp, bwd, &cache.backward[t], &gh, &gc_next, g_bwd);
        for (a, v) in g_seq.data_mut()[t * d..(t + 1) * d].iter_mut().zip(g.x) {
            *a += v;
        }
        gh_next = g.h_prev;
        gc_next = g.c_prev;
    }
    Ok(g_seq)
}

#[derive(Clone, Debug)]
pub struct Blstm<T> {
    pub forward_cell: LstmCell<T>,
    pub backward_cell: LstmCell<T>,
}

impl<T: Scalar> Blstm<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            forward_cell: LstmCell::from_params(LstmCellParams::random(input, hidden, rng)),
            backward_cell: LstmCell::from_params(LstmCellParams::random(input, hidden, rng)),
        }
    }

    pub fn forward(&self, seq: &Tensor<T>) -> Result<(Tensor<T>, BlstmCache<T>)> {
        blstm_forward(seq, &self.forward_cell.params(), &self.backward_cell.params())
    }

    pub fn backward(&mut self, cache: &BlstmCache<T>, g_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (pf, pb) = (self.forward_cell.params(), self.backward_cell.params());
        let mut gf = LstmCellParams::zeros(pf.input(), pf.hidden());
        let mut gb = LstmCellParams::zeros(pb.input(), pb.hidden());
        let g = blstm_backward(&pf, &pb, cache, g_out, &mut gf, &mut gb)?;
        for (cell, gp) in [(&mut self.forward_cell, gf), (&mut self.backward_cell, gb)] {
            cell.w.grad.add_assign(&gp.w)?;
            cell.u.grad.add_assign(&gp.u)?;
            cell.b.grad.add_assign(&gp.b)?;
        }
        Ok(g)
    }
}

impl<T: Scalar> Parameterized<T> for Blstm<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.forward_cell.visit_mut(&join(prefix, "forward"), f);
        self.backward_cell.visit_mut(&join(prefix, "backward"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        self.forward_cell.visit(&join(prefix, "forward"), f);
        self.backward_cell.visit(&join(prefix, "backward"), f);
    }
}

/// `dense + relu + dense`, or a single dense layer when `head_hidden == 0`.
#[derive(Clone, Debug)]
pub struct ClassHead<T> {
    pub hidden: Option<Dense<T>>,
    pub out: Dense<T>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    input: Tensor<T>,
    activated: Option<Tensor<T>>,
}

impl<T: Scalar> ClassHead<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, head_hidden: usize, rng: &mut R) -> Self {
        if head_hidden == 0 {
            return Self {
                hidden: None,
                out: Dense::new(input, NUM_CLASSES, true, rng),
            };
        }
        Self {
            hidden: Some(Dense::new(input, head_hidden, true, rng)),
            out: Dense::new(head_hidden, NUM_CLASSES, true, rng),
        }
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
        let activated = match &self.hidden {
            Some(layer) => Some(relu(&layer.forward(features)?)),
            None => None,
        };
        let logits = self.out.forward(activated.as_ref().unwrap_or(features))?;
        Ok((
            logits,
            HeadCache {
                input: features.clone(),
                activated,
            },
        ))
    }

    pub fn backward(&mut self, cache: &HeadCache<T>, g_logits: &Tensor<T>) -> Result<Tensor<T>> {
        match (self.hidden.as_mut(), cache.activated.as_ref()) {
            (Some(layer), Some(act)) => {
                let g_act = self.out.backward(act, g_logits)?;
                let g_pre = elementwise_backward(Elementwise::Relu, act, None, act, &g_act)?.0;
                layer.backward(&cache.input, &g_pre)
            }
            _ => self.out.backward(&cache.input, g_logits),
        }
    }
}

impl<T: Scalar> Parameterized<T> for ClassHead<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        if let Some(h) = self.hidden.as_mut() {
            h.visit_mut(&join(prefix, "hidden"), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        if let Some(h) = self.hidden.as_ref() {
            h.visit(&join(prefix, "hidden"), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }
}

/// `[T,2H]` → logits `[T,7]`, one row per timestep.
pub fn classify_clip<T: Scalar>(seq_features: &Tensor<T>, head: &ClassHead<T>) -> Result<Tensor<T>> {
    Ok(head.forward(seq_features)?.0)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2("predict")?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// BLSTM followed by the classification head.
#[derive(Clone, Debug)]
pub struct SequenceModel<T> {
    config: SequenceConfig,
    pub blstm: Blstm<T>,
    pub head: ClassHead<T>,
}

#[derive(Clone, Debug)]
pub struct SequenceCache<T> {
    blstm: BlstmCache<T>,
    head: HeadCache<T>,
}

impl<T: Scalar> SequenceModel<T> {
    pub fn new<R: Rng + ?Sized>(config: SequenceConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blstm = Blstm::new(config.input_dim, config.hidden_size, rng);
        let head = ClassHead::new(2 * config.hidden_size, config.head_hidden, rng);
        Ok(Self { config, blstm, head })
    }

    pub fn config(&self) -> &SequenceConfig {
        &self.config
    }

    /// `seq: [T,D]` → logits `[T,7]`.
    pub fn forward(&self, seq: &Tensor<T>) -> Result<(Tensor<T>, SequenceCache<T>)> {
        let (features, blstm) = self.blstm.forward(seq)?;
        let (logits, head) = self.head.forward(&features)?;
        Ok((logits, SequenceCache { blstm, head }))
    }

    pub fn backward(&mut self, cache: &SequenceCache<T>, g_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let g_features = self.head.backward(&cache.head, g_logits)?;
        self.blstm.backward(&cache.blstm, &g_features)
    }
}

impl<T: Scalar> Parameterized<T> for SequenceModel<T> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.blstm.visit_mut(&join(prefix, "blstm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>)) {
        self.blstm.visit(&join(prefix, "blstm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}
