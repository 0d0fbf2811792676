//! Operation tape for reverse-mode differentiation.

use super::{Shape, Tensor};
use std::cell::RefCell;

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

/// Records every operation applied to [`Var`]s so gradients can be pulled
/// back from a scalar result. One tape per forward pass; drop it afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf (input or parameter). Gradients accumulate on leaves
    /// like on any other node and can be read back after `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, None)
    }

    pub(crate) fn push(&self, value: Tensor, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, idx: usize) -> Tensor {
        self.nodes.borrow()[idx].value.clone()
    }

    pub(crate) fn shape_of(&self, idx: usize) -> Shape {
        self.nodes.borrow()[idx].value.shape()
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node.
    ///
    /// Accumulation order is the fixed reverse creation order, so results are
    /// deterministic.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(
            std::ptr::eq(root.tape, self),
            "backward called with a var from another tape"
        );
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.idx].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.idx] = Some(Tensor::scalar(1.0));
        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let Some(back) = nodes[i].backward.as_ref() else {
                continue;
            };
            for (parent, contrib) in back(&g) {
                debug_assert!(parent < i, "backward edge must point to earlier node");
                match &mut grads[parent] {
                    Some(acc) => {
                        let d = acc.data_mut();
                        for (dst, src) in d.iter_mut().zip(contrib.data()) {
                            *dst += src;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) idx: usize,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Shape {
        self.tape.shape_of(self.idx)
    }

    /// Scalar value (panics if not a 1-element tensor).
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// The tape this var is recorded on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub(crate) fn same_tape(&self, other: &Var<'t>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `var`, or `None` if the root does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `var`, zeros if unreachable from the root.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_chain() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([1, 1, 1, 2], vec![3.0, 4.0]));
        let y = x.scale(2.0).add_scalar(1.0); // 2x + 1
        let s = y.sum_all();
        assert_eq!(s.item(), 16.0);
        let grads = tape.backward(s);
        assert_eq!(grads.wrt(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x); // x^2, both parents are the same node
        let grads = tape.backward(y);
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn unreachable_grad_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.leaf(Tensor::scalar(2.0));
        let s = x.scale(5.0);
        let grads = tape.backward(s);
        assert!(grads.get(y).is_none());
        assert_eq!(grads.wrt(y).item(), 0.0);
    }
}
