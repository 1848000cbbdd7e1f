//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! Every forward computation runs on a [`Tape`]. Ops record backward closures
//! when the tape has gradients enabled and at least one input is tracked;
//! otherwise they are plain array math. A tape lives for one forward/backward
//! cycle and is dropped afterwards, which is what clears the graph between
//! optimizer steps.

mod adam;
mod check;
mod ops;
mod param;

pub use adam::{adam_step, Adam, AdamState};
pub use check::{assert_grad_ok, grad_check, GradCheckReport};
pub use ops::argmax;
pub use param::Param;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

pub(crate) type BackOp = Box<dyn Fn(&mut GradBuf)>;

pub(crate) struct NodeData {
    pub data: Rc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub tracked: bool,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<NodeData>,
    pub backops: Vec<Option<BackOp>>,
    pub grads: GradBuf,
    pub grad_enabled: bool,
    // dedup map so reading the same Param twice yields one leaf node
    param_leaves: HashMap<usize, usize>,
}

/// Gradient buffers indexed by node id, allocated lazily during backward.
pub(crate) struct GradBuf {
    pub g: Vec<Option<Vec<f64>>>,
}

impl GradBuf {
    fn ensure_len(&mut self, n: usize) {
        if self.g.len() < n {
            self.g.resize_with(n, || None);
        }
    }

    pub(crate) fn get(&self, id: usize) -> Option<&[f64]> {
        self.g.get(id).and_then(|o| o.as_deref())
    }

    /// Zero-initialized gradient slice for node `id`.
    pub(crate) fn buf(&mut self, id: usize, numel: usize) -> &mut [f64] {
        self.ensure_len(id + 1);
        self.g[id].get_or_insert_with(|| vec![0.0; numel])
    }
}

/// Recording context for one forward/backward cycle.
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    /// Tape that records backward closures for tracked tensors.
    pub fn new() -> Self {
        Tape::with_grad(true)
    }

    /// Tape that never records; use for inference.
    pub fn no_grad() -> Self {
        Tape::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                backops: Vec::new(),
                grads: GradBuf { g: Vec::new() },
                grad_enabled,
                param_leaves: HashMap::new(),
            })),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    pub(crate) fn next_id(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub(crate) fn push(
        &self,
        data: Vec<f64>,
        shape: Vec<usize>,
        tracked: bool,
        backop: Option<BackOp>,
    ) -> Tensor {
        self.push_rc(Rc::new(data), shape, tracked, backop)
    }

    pub(crate) fn push_rc(
        &self,
        data: Rc<Vec<f64>>,
        shape: Vec<usize>,
        tracked: bool,
        backop: Option<BackOp>,
    ) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(NodeData {
            data,
            shape: shape.clone(),
            tracked,
        });
        inner.backops.push(backop);
        Tensor {
            tape: Rc::clone(&self.inner),
            id,
            shape,
        }
    }

    /// Untracked leaf.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        self.push(data, shape.to_vec(), false, None)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        self.constant(vec![0.0; n], shape)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(vec![v], &[1])
    }

    /// Tracked leaf (a gradient target not attached to a [`Param`]).
    pub fn var(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        let tracked = self.grad_enabled();
        self.push(data, shape.to_vec(), tracked, None)
    }

    /// Leaf for a model parameter. Repeated reads of the same parameter on
    /// one tape return the same node so its gradient accumulates correctly.
    pub fn read(&self, p: &Param) -> Tensor {
        let key = p.identity();
        if let Some(&id) = self.inner.borrow().param_leaves.get(&key) {
            let shape = self.inner.borrow().nodes[id].shape.clone();
            return Tensor {
                tape: Rc::clone(&self.inner),
                id,
                shape,
            };
        }
        let tracked = self.grad_enabled();
        let t = self.push_rc(p.value_rc(), p.shape().to_vec(), tracked, None);
        self.inner.borrow_mut().param_leaves.insert(key, t.id);
        t
    }

    /// Gradient of the most recent backward pass w.r.t. a parameter.
    /// Zeros if the parameter never entered the graph or received no signal.
    pub fn grad_for(&self, p: &Param) -> Vec<f64> {
        let inner = self.inner.borrow();
        if let Some(&id) = inner.param_leaves.get(&p.identity()) {
            if let Some(g) = inner.grads.get(id) {
                return g.to_vec();
            }
        }
        vec![0.0; p.len()]
    }

}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to one node on a tape. Cloning is cheap; the underlying buffer is
/// shared and immutable once written.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) tape: Rc<RefCell<TapeInner>>,
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Shared handle to the value buffer.
    pub fn data(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.borrow().nodes[self.id].data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.borrow().nodes[self.id].data.as_ref().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor, got shape {:?}", self.shape);
        self.tape.borrow().nodes[self.id].data[0]
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.borrow().nodes[self.id].tracked
    }

    /// Accumulated gradient from backward passes on this tape.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.borrow().grads.get(self.id).map(|g| g.to_vec())
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into the tape;
    /// dropping the tape is what resets them.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.shape
        );
        let mut inner = self.tape.borrow_mut();
        let n = inner.nodes.len();
        inner.grads.ensure_len(n);
        // Leaf gradients accumulate across backward calls; intermediate
        // gradients are scratch for this pass only.
        for id in 0..n {
            if inner.backops[id].is_some() {
                inner.grads.g[id] = None;
            }
        }
        {
            let seed = inner.grads.buf(self.id, 1);
            seed[0] += 1.0;
        }
        let TapeInner {
            ref backops,
            ref mut grads,
            ..
        } = *inner;
        for id in (0..=self.id).rev() {
            if grads.get(id).is_none() {
                continue;
            }
            if let Some(op) = &backops[id] {
                op(grads);
            }
        }
    }

    pub(crate) fn same_tape(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    pub(crate) fn tape_handle(&self) -> Tape {
        Tape {
            inner: Rc::clone(&self.tape),
        }
    }

    /// Finiteness check; forward and backward results must stay finite.
    pub fn assert_finite(&self, what: &str) {
        let data = self.data();
        for (i, v) in data.iter().enumerate() {
            assert!(
                v.is_finite(),
                "non-finite value {v} at index {i} in {what} (shape {:?})",
                self.shape
            );
        }
    }
}
