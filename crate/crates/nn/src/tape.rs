//! Reverse-mode autodiff tape. One tape per forward pass; `backward`
//! deposits gradients into the `Param`s that participated.

use std::cell::RefCell;

use crate::array::Array;
use crate::param::Param;
use crate::scalar::Scalar;

/// Maps the output gradient to input gradients. `needs[i]` tells the op
/// whether input `i` is differentiable; expensive ops skip dead branches.
type BackFn<T> = Box<dyn Fn(&Array<T>, &[bool]) -> Vec<Option<Array<T>>>>;

pub(crate) struct Node<T: Scalar> {
    /// Tape indices of differentiable inputs, aligned with the grads the
    /// backward closure returns (`None` entries are constants).
    parents: Vec<Option<usize>>,
    back: Option<BackFn<T>>,
    param: Option<Param<T>>,
}

/// A value on the tape. `node == None` marks a constant (no gradient).
#[derive(Clone)]
pub struct Var<T: Scalar> {
    pub(crate) value: Array<T>,
    pub(crate) node: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn into_value(self) -> Array<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }
}

pub struct Tape<T: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Tape<T> {
    /// A recording tape for training.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// A non-recording tape: ops compute values only. Use for sampling and
    /// evaluation loops where gradients are never needed.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Wrap an array as a constant (no gradient flows into it).
    pub fn constant(value: Array<T>) -> Var<T> {
        Var { value, node: None }
    }

    /// Leaf variable for a trainable parameter. `backward` will accumulate
    /// into `p.grad`.
    pub fn param(&self, p: &Param<T>) -> Var<T> {
        let value = p.value();
        if !self.recording {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { parents: Vec::new(), back: None, param: Some(p.clone()) });
        Var { value, node: Some(idx) }
    }

    /// Detach: same value, no history.
    pub fn detach(&self, v: &Var<T>) -> Var<T> {
        Var { value: v.value.clone(), node: None }
    }

    /// Record an op. `parents` are the nodes of the differentiable inputs;
    /// `back` maps the output gradient to input gradients in the same order.
    pub(crate) fn push(
        &self,
        value: Array<T>,
        parents: Vec<Option<usize>>,
        back: BackFn<T>,
    ) -> Var<T> {
        if !self.recording || parents.iter().all(|p| p.is_none()) {
            return Var { value, node: None };
        }
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { parents, back: Some(back), param: None });
        Var { value, node: Some(idx) }
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into params.
    pub fn backward(&self, loss: &Var<T>) {
        assert!(self.recording, "backward on a non-recording tape");
        let root = match loss.node {
            Some(n) => n,
            None => return, // loss does not depend on any parameter
        };
        assert_eq!(loss.value.len(), 1, "backward expects a scalar loss");

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array<T>>> = vec![None; nodes.len()];
        grads[root] = Some(Array::full(loss.value.shape(), T::ONE));

        for idx in (0..=root).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            if let Some(p) = &node.param {
                p.accumulate_grad(&g);
                continue;
            }
            if let Some(back) = &node.back {
                let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
                let parent_grads = back(&g, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (parent, pg) in node.parents.iter().zip(parent_grads) {
                    if let (Some(pidx), Some(pg)) = (parent, pg) {
                        match &mut grads[*pidx] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
