//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Every loss in this crate must expose analytic gradients with respect to
//! its tensor inputs, so the substrate is a small tape: each [`Tensor`] owns
//! its value, an optional gradient slot, and a backward closure linking it to
//! its parents. Calling [`Tensor::backward`] on a scalar walks the graph in
//! reverse topological order and deposits gradients into leaf tensors.
//!
//! Single-threaded by design: graphs are built and consumed on the training
//! thread, matching the crate's concurrency model (frozen models are shared
//! read-only, mutable models never leave the thread that owns them).

mod conv;
mod ops;

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

pub use conv::{avg_pool2d, conv2d, global_avg_pool, upsample_nearest2};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Context handed to a backward closure.
pub(crate) struct BackCtx<'a> {
    /// Upstream gradient with the same shape as the node's output.
    pub grad: &'a ArrayD<f64>,
    /// The node's forward output.
    pub output: &'a ArrayD<f64>,
    /// Parent tensors, in the order they were registered.
    pub parents: &'a [Tensor],
}

type BackFn = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    id: u64,
    data: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    back: Option<BackFn>,
}

/// A node in the autodiff graph. Cloning is cheap (reference-counted).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Leaf tensor from an owned array.
    pub fn new(data: ArrayD<f64>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                back: None,
            }),
        }
    }

    /// Constant leaf (no gradient tracking).
    pub fn constant(data: ArrayD<f64>) -> Self {
        Tensor::new(data, false)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Self {
        Tensor::new(ArrayD::zeros(IxDyn(shape)), requires_grad)
    }

    pub(crate) fn from_op(
        data: ArrayD<f64>,
        parents: Vec<Tensor>,
        back: BackFn,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            // Dead branch for autodiff: keep the value, drop the tape.
            return Tensor::constant(data);
        }
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                back: Some(back),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.back.is_none()
    }

    pub fn data(&self) -> Ref<'_, ArrayD<f64>> {
        self.node.data.borrow()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.node.data.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.data.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with {} elements", d.len());
        *d.iter().next().unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.node.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Accumulated gradient of a leaf, if backward has touched it.
    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// In-place update of a leaf's value (optimizer step). Panics on
    /// non-leaf tensors: interior nodes are owned by the tape.
    pub fn update_data(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        assert!(self.is_leaf(), "update_data on non-leaf tensor");
        f(&mut self.node.data.borrow_mut());
    }

    /// New constant leaf sharing this tensor's current value.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.node.data.borrow().clone())
    }

    /// Reverse-mode sweep from a scalar output. Gradients accumulate into
    /// the `grad` slots of every `requires_grad` leaf reachable from here.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        if !self.node.requires_grad {
            return;
        }

        // Iterative post-order DFS; parents before children in `order`.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id, ());
        while let Some((t, pi)) = stack.pop() {
            if pi < t.node.parents.len() {
                let parent = t.node.parents[pi].clone();
                stack.push((t, pi + 1));
                if parent.requires_grad() && !visited.contains_key(&parent.node.id) {
                    visited.insert(parent.node.id, ());
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut grads: HashMap<u64, ArrayD<f64>> = HashMap::new();
        grads.insert(self.node.id, ArrayD::ones(IxDyn(&[1])));

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.node.id) else {
                continue;
            };
            if t.is_leaf() {
                let mut slot = t.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
                continue;
            }
            let contributions = {
                let output = t.node.data.borrow();
                let ctx = BackCtx {
                    grad: &g,
                    output: &output,
                    parents: &t.node.parents,
                };
                (t.node.back.as_ref().unwrap())(&ctx)
            };
            debug_assert_eq!(contributions.len(), t.node.parents.len());
            for (parent, contrib) in t.node.parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(
                    c.shape(),
                    parent.data().shape(),
                    "gradient shape mismatch flowing into parent {}",
                    parent.node.id
                );
                match grads.get_mut(&parent.node.id) {
                    Some(acc) => *acc += &c,
                    None => {
                        grads.insert(parent.node.id, c);
                    }
                }
            }
        }
    }
}
