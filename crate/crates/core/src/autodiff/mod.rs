//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed on [`Var`] handles. Calling
//! [`Tape::backward`] replays the record in exact reverse order and leaves
//! gradients on the leaves created with `requires_grad = true`. Operations
//! whose inputs are all constants are recorded as constants and skipped by
//! the backward pass, which is how teacher-side computation stays detached.

mod backward;
pub mod gradcheck;
mod ops;

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many};

pub type NodeId = usize;

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Gelu(NodeId),
    MatMul(NodeId, NodeId, crate::tensor::MatmulDims),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    BroadcastTo(NodeId),
    SumAxis(NodeId, usize),
    SumAll(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    MaskedFill(NodeId, Vec<bool>),
    L2Norm(NodeId),
    Std(NodeId, Vec<f64>),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize),
    Embedding(NodeId, Vec<usize>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        total: f64,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Debug, Default)]
struct TapeState {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    consumed: bool,
    visit_order: Vec<NodeId>,
}

/// Operation record for one forward/backward pass. Single-threaded; use one
/// tape per thread.
#[derive(Debug, Default)]
pub struct Tape {
    state: RefCell<TapeState>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an input. Gradients are kept for it after `backward` when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.state.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&self) {
        *self.state.borrow_mut() = TapeState::default();
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.state.borrow().leaf_grads.get(var.id).cloned().flatten()
    }

    /// Node ids in the order the last backward pass visited them.
    pub fn backward_order(&self) -> Vec<NodeId> {
        self.state.borrow().visit_order.clone()
    }

    /// Back-propagates from a scalar loss. Rejected if this tape has already
    /// run a backward pass since the last [`Tape::reset`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut st = self.state.borrow_mut();
        if st.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if st.consumed {
            return Err(Error::BackwardTwice);
        }
        let shape = st.nodes[loss.id].value.shape().to_vec();
        if st.nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        st.consumed = true;
        let (leaf_grads, order) = backward::run(&st.nodes, loss.id);
        st.leaf_grads = leaf_grads;
        st.visit_order = order;
        Ok(())
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut st = self.state.borrow_mut();
        let id = st.nodes.len();
        st.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records a derived value; the op is only kept when some parent needs a gradient.
    pub(crate) fn record(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        if requires_grad {
            self.push(value, op, true)
        } else {
            self.push(value, Op::Leaf, false)
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        Ref::map(self.state.borrow(), |s| &s.nodes)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.state.borrow(), |s| &s.nodes[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.state.borrow().nodes[self.id].requires_grad
    }

    /// A constant copy of this value; gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_tensor())
    }
}
