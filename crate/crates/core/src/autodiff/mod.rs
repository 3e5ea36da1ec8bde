//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation pushes one node holding its output value, the indices of
//! its inputs and a backward closure. [`Tape::backward`] walks the nodes in
//! exact reverse order, accumulates gradients into the [`ParamSet`]s the
//! leaves were drawn from, and clears the tape.

mod conv;
mod norm;
mod ops;
mod resize;

use std::collections::BTreeMap;

pub use conv::{conv2d_output_extent, Conv2dSpec};
pub use norm::{BatchStats, BnMode};
pub use ops::Elementwise;
pub use resize::ResizePlan;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule: given the output gradient, the input values, the output
/// value and which inputs need a gradient, produce one optional gradient per
/// input.
type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

#[derive(Clone, Copy, Debug)]
struct ParamLink {
    set: u64,
    id: ParamId,
}

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
    param: Option<ParamLink>,
}

/// Single-owner record of executed operations.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    bindings: Vec<(u64, ParamId, Var)>,
    params_trainable: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the non-parameter leaves that asked for one.
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    by_leaf: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, leaf: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&leaf.0)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor<T>> {
        self.by_leaf.remove(&leaf.0)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            bindings: Vec::new(),
            params_trainable: true,
        }
    }

    /// A tape that records values only; nothing on it is differentiable.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
            bindings: Vec::new(),
            params_trainable: true,
        }
    }

    /// Treat parameters as constants: gradients flow only to leaves
    /// created with `requires_grad`.
    pub fn freeze_params(mut self) -> Self {
        self.params_trainable = false;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Which branch every piecewise operation took: the input sign of each
    /// `relu`/`abs` element and the pivot of each `normalize_rows_by_max`
    /// row. Two evaluations with equal signatures lie on one smooth piece.
    pub fn branch_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            let Some(&first) = node.inputs.first() else { continue };
            let x = &self.nodes[first].value;
            match node.op {
                "relu" | "abs" => sig.extend(x.data().iter().map(|&v| {
                    if v > T::zero() {
                        1
                    } else if v < T::zero() {
                        -1
                    } else {
                        0
                    }
                })),
                "normalize_rows_by_max" => {
                    let k = x.shape()[1].max(1);
                    for row in x.data().chunks(k) {
                        let (arg, max) = row
                            .iter()
                            .enumerate()
                            .fold((0, T::neg_infinity()), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) });
                        sig.push(if max > T::zero() { arg as i64 } else { -1 });
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Drop every recorded node and the inputs it saved.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool, param: Option<ParamLink>) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            needs_grad: needs_grad && self.grad_enabled,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input tensor; `requires_grad` leaves receive a gradient in the
    /// [`Gradients`] returned by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Copy of a parameter's current value, linked back for gradient
    /// accumulation, or the variable bound to it by [`Tape::bind_param`].
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        if let Some(&(_, _, var)) = self.bindings.iter().find(|b| b.0 == set.uid() && b.1 == id) {
            return var;
        }
        let value = set.get(id).value.cast::<T>();
        self.push_leaf(
            value,
            self.params_trainable,
            Some(ParamLink {
                set: set.uid(),
                id,
            }),
        )
    }

    /// Make later [`Tape::param`] lookups of `id` return `var`, so code
    /// written against a parameter set can be differentiated with respect
    /// to one of its parameters as an ordinary input.
    pub fn bind_param(&mut self, set: &ParamSet, id: ParamId, var: Var) -> Result<()> {
        if self.value(var).shape() != set.get(id).value.shape() {
            return Err(Error::shape("bind_param", self.value(var).shape(), set.get(id).value.shape()));
        }
        self.bindings.retain(|b| !(b.0 == set.uid() && b.1 == id));
        self.bindings.push((set.uid(), id, var));
        Ok(())
    }

    pub(crate) fn record(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>
            + 'static,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(op.to_string()));
        }
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if needs_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagate from a scalar `loss`.
    ///
    /// Gradients are accumulated (`+=`) into the parameters of `params`;
    /// parameters the loss does not reach are left untouched. The tape is
    /// cleared afterwards, even on error.
    pub fn backward(&mut self, loss: Var, params: &mut [&mut ParamSet]) -> Result<Gradients<T>> {
        let result = self.backward_inner(loss, params);
        self.clear();
        result
    }

    fn backward_inner(&mut self, loss: Var, params: &mut [&mut ParamSet]) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::usage("backward on an empty tape"));
        }
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        let mut by_leaf = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(backward) = &node.backward {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].needs_grad).collect();
                let input_grads = backward(&grad, &inputs, &node.value, &needs)?;
                for ((&j, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                    let Some(g) = g else { continue };
                    if !need {
                        continue;
                    }
                    if !g.all_finite() {
                        return Err(Error::Numeric(format!("backward of {}", node.op)));
                    }
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
            } else if let Some(link) = node.param {
                let set = params
                    .iter_mut()
                    .find(|s| s.uid() == link.set)
                    .ok_or_else(|| Error::usage("backward reached a parameter whose set was not supplied"))?;
                set.get_mut(link.id).grad.add_assign(&grad.cast::<f32>())?;
            } else {
                by_leaf.insert(i, grad);
            }
        }
        Ok(Gradients { by_leaf })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut set = ParamSet::new();
        let p = set.add("p", Tensor::from_f64(&[3], &[1.0, -2.0, 5.0]).unwrap());
        let mut tape = Tape::<f32>::new();
        let v = tape.param(&set, p);
        let loss = tape.sum_all(v).unwrap();
        tape.backward(loss, &mut [&mut set]).unwrap();
        assert_eq!(set.get(p).grad.data(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut set = ParamSet::new();
        let p = set.add("p", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let mut tape = Tape::<f32>::new();
        let v = tape.param(&set, p);
        let sq = tape.square(v).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss, &mut [&mut set]).unwrap();
        assert_eq!(set.get(p).grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn gradients_accumulate_and_unreached_params_untouched() {
        let mut set = ParamSet::new();
        let p = set.add("p", Tensor::ones(&[2]));
        let q = set.add("q", Tensor::ones(&[2]));
        set.get_mut(q).grad.fill(7.0);
        for _ in 0..2 {
            let mut tape = Tape::<f32>::new();
            let v = tape.param(&set, p);
            let _unused = tape.param(&set, q);
            let loss = tape.sum_all(v).unwrap();
            tape.backward(loss, &mut [&mut set]).unwrap();
        }
        assert_eq!(set.get(p).grad.data(), &[2.0, 2.0]);
        assert_eq!(set.get(q).grad.data(), &[7.0, 7.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::<f32>::new();
        let v = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(v, &mut []), Err(Error::Usage(_))));
    }

    #[test]
    fn empty_tape_is_usage_error() {
        let mut tape = Tape::<f32>::new();
        assert!(matches!(tape.backward(Var(0), &mut []), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_input_gets_both_contributions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1], &[3.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let loss = tape.sum_all(z).unwrap();
        let g = tape.backward(loss, &mut []).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn inference_tape_records_nothing_differentiable() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s, &mut []).unwrap();
        assert!(g.get(x).is_none());
    }
}
