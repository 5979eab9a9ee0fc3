//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and a backward rule.
//! Nodes are only ever appended, so the tape is already in topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! The tape also counts floating point operations as it records them,
//! using these conventions (one multiply-accumulate is 2 FLOPs):
//!
//! | op | FLOPs |
//! |---|---|
//! | add, sub, mul, scale | 1 per output element |
//! | mean / sum / max reduction | 1 per input element |
//! | softmax | 5 per element |
//! | sigmoid, tanh | 4 per element |
//! | relu | 1 per element |
//! | matmul `m x k x n` | `2mkn` |
//! | conv2d | 2 per kernel tap per output element |
//! | reshape, transpose, broadcast | 0 |
//!
//! Graph attention reports its own count; see [`crate::attention`].
//!
//! Counts are kept per [`FlopCount`] category so that the profiler-style
//! convention (multiply-accumulates and pooling reductions only) can be
//! read off the same recording.

mod conv;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use ops::{ReduceKind, MASK_LOGIT};

/// Inputs handed to a [`Backward`] rule.
pub struct BackwardCtx<'a, T: Scalar> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    /// Whether each input needs a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// FLOPs split by operation category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// Multiply-accumulates, 2 FLOPs each.
    pub mac: u64,
    /// Mean / sum / max reductions, 1 per input element.
    pub reduce: u64,
    /// Elementwise arithmetic, activations and softmax.
    pub pointwise: u64,
}

impl FlopCount {
    pub const ZERO: Self = Self {
        mac: 0,
        reduce: 0,
        pointwise: 0,
    };

    pub fn mac(n: u64) -> Self {
        Self {
            mac: n,
            ..Self::ZERO
        }
    }

    pub fn reduce(n: u64) -> Self {
        Self {
            reduce: n,
            ..Self::ZERO
        }
    }

    pub fn pointwise(n: u64) -> Self {
        Self {
            pointwise: n,
            ..Self::ZERO
        }
    }

    /// Every category counted.
    pub fn total(self) -> u64 {
        self.mac + self.reduce + self.pointwise
    }

    /// Multiply-accumulates and pooling only, as layer profilers count;
    /// elementwise arithmetic and activations are free.
    pub fn profiler(self) -> u64 {
        self.mac + self.reduce
    }
}

impl Add for FlopCount {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            mac: self.mac + o.mac,
            reduce: self.reduce + o.reduce,
            pointwise: self.pointwise + o.pointwise,
        }
    }
}

impl AddAssign for FlopCount {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sub for FlopCount {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            mac: self.mac - o.mac,
            reduce: self.reduce - o.reduce,
            pointwise: self.pointwise - o.pointwise,
        }
    }
}

impl Mul<u64> for FlopCount {
    type Output = Self;
    fn mul(self, k: u64) -> Self {
        Self {
            mac: self.mac * k,
            reduce: self.reduce * k,
            pointwise: self.pointwise * k,
        }
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar> {
    /// Gradient contribution for each input, `None` where not needed.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward<T>>>,
    needs_grad: bool,
}

/// Recording of one forward computation. Single-threaded; create one per
/// forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    flops: Cell<FlopCount>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            flops: Cell::new(FlopCount::ZERO),
        }
    }

    /// Records a leaf. Gradients are tracked iff `value.requires_grad()`.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let needs_grad = value.requires_grad();
        self.push(value, Vec::new(), None, needs_grad)
    }

    /// Leaf that always tracks gradients (a trainable parameter or a
    /// gradient-checked input).
    pub fn param(&self, value: &Tensor<T>) -> Var<'_, T> {
        let mut v = value.clone();
        v.set_requires_grad(true);
        v.zero_grad();
        self.leaf(v)
    }

    /// Leaf that never tracks gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        let mut v = value;
        v.set_requires_grad(false);
        self.leaf(v)
    }

    /// Records a user-defined operation.
    pub fn custom(
        &self,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        rule: Box<dyn Backward<T>>,
        flops: FlopCount,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].needs_grad)
        };
        self.add_flops(flops);
        self.push(value, ids, Some(rule), needs)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// FLOPs executed by every operation recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops.get().total()
    }

    pub fn flop_count(&self) -> FlopCount {
        self.flops.get()
    }

    pub(crate) fn add_flops(&self, n: FlopCount) {
        self.flops.set(self.flops.get() + n);
    }

    fn push(
        &self,
        value: Tensor<T>,
        inputs: Vec<usize>,
        rule: Option<Box<dyn Backward<T>>>,
        needs_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            inputs,
            rule,
            needs_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Runs `f` with borrowed input values.
    pub(crate) fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&Tensor<T>]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor<T>> = ids.iter().map(|&i| &nodes[i].value).collect();
        f(&vals)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(rule) = &node.rule else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node.inputs.iter().map(|&i| nodes[i].needs_grad).collect(),
            };
            let contribs = rule.backward(&ctx);
            debug_assert_eq!(contribs.len(), node.inputs.len());
            for (&inp, c) in node.inputs.iter().zip(contribs) {
                let Some(c) = c else { continue };
                if !nodes[inp].needs_grad {
                    continue;
                }
                match &mut grads[inp] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a += *v;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
            if id == loss.id {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf with respect to the loss; `None` if the leaf does
    /// not influence the loss or does not track gradients.
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreached leaves.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Vec<T> {
        match self.get(var) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); var.len()],
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.value().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Copy of the recorded value.
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut t = self.value().clone();
        t.set_requires_grad(false);
        t.zero_grad();
        t
    }

    /// First element as a plain number (for scalar outputs).
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::zeros(&[2]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_accumulates_over_fan_out() {
        // f(x) = sum(x * x + x) -> df/dx = 2x + 1
        let tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let y = x.mul(x).unwrap().add(x).unwrap().sum_all();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let x = tape.param(&Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let y = c.mul(x).unwrap().sum_all();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn three_op_chain_matches_closed_form() {
        // L = sum(sigmoid(a * x) * b); dL/dx = a b s (1 - s)
        let (a, b, xv) = (0.7, -1.3, 0.4);
        let tape = Tape::<f64>::new();
        let x = tape.param(&Tensor::scalar(xv));
        let ca = tape.constant(Tensor::scalar(a));
        let cb = tape.constant(Tensor::scalar(b));
        let l = ca.mul(x).unwrap().sigmoid().mul(cb).unwrap().sum_all();
        let g = tape.backward(l).unwrap();
        let s = 1.0 / (1.0 + (-a * xv).exp());
        let want = a * b * s * (1.0 - s);
        assert!((g.get(x).unwrap()[0] - want).abs() < 1e-15);
    }
}
