use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Mutable access to one named tensor of a model.
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a mut Tensor<T>),
}

pub enum SlotRef<'a, T> {
    Param(&'a Param<T>),
    Buffer(&'a Tensor<T>),
}

impl<T> SlotRef<'_, T> {
    pub fn tensor(&self) -> &Tensor<T> {
        match self {
            SlotRef::Param(p) => &p.value,
            SlotRef::Buffer(t) => t,
        }
    }
}

/// Dotted-name traversal over parameters and buffers.
pub trait Parameterized<T: Scalar> {
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>));

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, SlotRef<'_, T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, slot| {
            if let SlotRef::Param(p) = slot {
                n += p.value.len();
            }
        });
        n
    }

    /// Every parameter and buffer in traversal order.
    fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, slot| out.push((name, slot.tensor().clone())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
