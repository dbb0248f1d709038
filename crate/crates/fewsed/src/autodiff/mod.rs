//! Minimal reverse-mode automatic differentiation on dynamically shaped
//! `f64` tensors.
//!
//! A [`Graph`] is a tape of operations recorded during one forward pass.
//! Every op pushes a node holding its parent ids and a backward closure that
//! maps the node's output gradient to parent gradients. [`Var`] is a cheap
//! handle carrying the node id plus an `Rc` to the forward value, so values
//! of intermediate nodes are freed as soon as nothing references them (the
//! tape itself keeps only what backward closures captured).
//!
//! Graphs built with [`Graph::inference`] record no closures at all: the
//! forward math is identical but nothing is retained, which is what the
//! evaluation paths use.

pub mod ops;

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

/// Dynamically shaped tensor used by the tape.
pub type TensorD = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&TensorD) -> Vec<TensorD>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Tape of recorded operations for one forward pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Graph {
    /// Graph that records backward closures (training mode).
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Graph that records nothing; forward values only.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A tensor that never receives a gradient (inputs, labels, masks).
    pub fn constant(&self, value: TensorD) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, false)
    }

    /// A differentiable leaf (model parameter).
    pub fn leaf(&self, value: TensorD) -> Var<'_> {
        self.insert(Rc::new(value), Vec::new(), None, self.grad_enabled)
    }

    fn insert(
        &self,
        value: Rc<TensorD>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents,
            backward,
            needs_grad,
        });
        Var {
            graph: self,
            id,
            value,
        }
    }

    /// Record an op node. `make_backward` is only invoked when some parent
    /// requires a gradient, so inference passes never build closures.
    pub(crate) fn push_op<'g>(
        &'g self,
        value: TensorD,
        parents: &[&Var<'g>],
        make_backward: impl FnOnce() -> BackwardFn,
    ) -> Var<'g> {
        let needs_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].needs_grad)
        };
        if needs_grad {
            self.insert(
                Rc::new(value),
                parents.iter().map(|p| p.id).collect(),
                Some(make_backward()),
                true,
            )
        } else {
            self.insert(Rc::new(value), Vec::new(), None, false)
        }
    }

    /// Reverse pass from a scalar root. Returns per-leaf gradients.
    ///
    /// Panics if `root` is not a single-element tensor.
    pub fn backward(&self, root: &Var<'_>) -> Gradients {
        assert_eq!(
            root.value.len(),
            1,
            "backward: root must be scalar, got shape {:?}",
            root.value.shape()
        );
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<TensorD>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(ArrayD::ones(IxDyn(root.value.shape())));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue; // leaf: keep accumulated gradient
            };
            let Some(grad) = grads[id].take() else {
                continue; // not on any path to the root
            };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[pid].needs_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Handle to a node's forward value.
#[derive(Clone)]
pub struct Var<'g> {
    graph: &'g Graph,
    pub(crate) id: usize,
    value: Rc<TensorD>,
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> &TensorD {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<TensorD> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Extract the single element of a scalar tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "scalar() on non-scalar Var");
        *self.value.iter().next().unwrap()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<TensorD>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&TensorD> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<TensorD> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr0;

    #[test]
    fn leaf_then_backward_yields_unit_gradient() {
        let g = Graph::new();
        let x = g.leaf(arr0(3.0).into_dyn());
        let grads = g.backward(&x);
        assert_eq!(grads.get(&x).unwrap()[[]], 1.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(arr0(2.0).into_dyn());
        let c = g.constant(arr0(5.0).into_dyn());
        let y = ops::mul(&x, &c);
        let grads = g.backward(&y);
        assert_eq!(grads.get(&x).unwrap()[[]], 5.0);
        assert!(grads.get(&c).is_none());
    }

    #[test]
    fn inference_graph_records_no_backward() {
        let g = Graph::inference();
        let x = g.leaf(arr0(2.0).into_dyn());
        let y = ops::mul(&x, &x);
        assert_eq!(y.scalar(), 4.0);
        assert!(!g.grad_enabled());
    }

    #[test]
    fn reused_var_accumulates_both_paths() {
        // y = x * x  =>  dy/dx = 2x
        let g = Graph::new();
        let x = g.leaf(arr0(3.0).into_dyn());
        let y = ops::mul(&x, &x);
        let grads = g.backward(&y);
        assert_eq!(grads.get(&x).unwrap()[[]], 6.0);
    }
}
