//! Minimal reverse-mode autodiff tape over `ndarray` tensors.
//!
//! Nodes are appended in topological order during the forward pass, so the
//! backward sweep is a single reverse scan. Backward closures capture
//! whatever forward state they need; when gradients are disabled (teacher
//! inference) no closures are built and the tape is just a value store.

use std::cell::RefCell;

use ndarray::ArrayD;

/// Handle to a node in a [`Graph`]. Cheap to copy; only valid for the graph
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn FnOnce(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub parents: Vec<Var>,
    pub backward: Option<BackwardFn>,
}

pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward closures are skipped.
    pub fn no_grad() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert an input node (parameter or data).
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Scalar constant node.
    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(ndarray::arr0(v).into_dyn())
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward: if self.grad_enabled { backward } else { None },
        });
        Var(id)
    }

    /// Clone of a node's value.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Zero-copy read of a node's value.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Scalar value of a 0-dim node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.with_value(v, |a| {
            debug_assert_eq!(a.ndim(), 0, "scalar_value on non-scalar node");
            *a.first().expect("empty tensor")
        })
    }

    /// Reverse sweep from a scalar root. Consumes the graph and returns the
    /// gradient of the root with respect to every node that has one.
    pub fn backward(self, root: Var) -> Gradients {
        let mut nodes = self.nodes.into_inner();
        let n = nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..n).map(|_| None).collect();
        {
            let root_val = &nodes[root.0].value;
            assert_eq!(root_val.ndim(), 0, "backward root must be scalar");
            grads[root.0] = Some(ndarray::arr0(1.0).into_dyn());
        }

        for id in (0..n).rev() {
            if grads[id].is_none() {
                continue;
            }
            let Some(back) = nodes[id].backward.take() else {
                continue;
            };
            let parent_ids = std::mem::take(&mut nodes[id].parents);
            let gout = grads[id].as_ref().expect("grad present");
            let parent_grads = back(gout);
            debug_assert_eq!(parent_grads.len(), parent_ids.len());
            for (pvar, pg) in parent_ids.into_iter().zip(parent_grads) {
                match &mut grads[pvar.0] {
                    Some(existing) => *existing += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        Gradients { grads }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled when the root does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(shape),
        }
    }
}
