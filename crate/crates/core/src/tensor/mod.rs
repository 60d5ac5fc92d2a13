//! Dense-tensor computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly, appends a
//! [`TensorNode`] holding the result, and records enough structure for
//! [`Graph::backward`] to replay the chain rule in reverse. Values are
//! 32-bit floats in row-major order. Non-finite results are rejected at
//! the op that produced them rather than propagated silently.

mod backward;
mod gradcheck;
mod ops;

pub use backward::Gradients;
pub use gradcheck::{grad_check, op_grad_battery, OpGradReport};

use thiserror::Error;

/// Handle to a node inside one [`Graph`]. Ids are only meaningful for the
/// graph that issued them.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Debug for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: node {id:?} is not part of this graph")]
    UnknownNode { op: &'static str, id: NodeId },
    #[error("{op}: produced a non-finite value (first at flat index {index})")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: index {index} out of bounds for extent {extent}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("values length {got} does not match shape {shape:?} (expected {expected})")]
    LengthMismatch {
        shape: Vec<usize>,
        got: usize,
        expected: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("masked softmax lane {lane} has every position masked")]
    AllMasked { lane: usize },
    #[error("grad check step must be positive and finite, got {0}")]
    InvalidStep(f32),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Producing operation of a node, together with its parent ids.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId, f32),
    MulScalar(NodeId, f32),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Concat { axis: usize, parts: Vec<NodeId> },
    Softmax { input: NodeId, axis: usize },
    MaskedSoftmax { input: NodeId, axis: usize, allow: std::sync::Arc<[bool]> },
    LogSoftmax { input: NodeId, axis: usize },
    Sum { input: NodeId, axis: Option<usize> },
    Mean { input: NodeId, axis: Option<usize> },
    Variance { input: NodeId, axis: usize },
    NormalizeRows { input: NodeId, eps: f32 },
    RowScale { input: NodeId, scale: NodeId },
    Gather { table: NodeId, indices: std::sync::Arc<[usize]> },
    PickPerRow { input: NodeId, indices: std::sync::Arc<[usize]> },
    Slice { input: NodeId, axis: usize, start: usize, len: usize },
    Reshape { input: NodeId },
    Transpose(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Variance { .. } => "variance",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::RowScale { .. } => "row_scale",
            Op::Gather { .. } => "gather",
            Op::PickPerRow { .. } => "pick_per_row",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Transpose(..) => "transpose",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Transpose(a) => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Softmax { input, .. }
            | Op::MaskedSoftmax { input, .. }
            | Op::LogSoftmax { input, .. }
            | Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::Variance { input, .. }
            | Op::NormalizeRows { input, .. }
            | Op::PickPerRow { input, .. }
            | Op::Slice { input, .. }
            | Op::Reshape { input }
            | Op::Gather { table: input, .. } => vec![*input],
            Op::RowScale { input, scale } => vec![*input, *scale],
        }
    }
}

/// One recorded tensor: shape, row-major values, and provenance.
#[derive(Clone, Debug)]
pub struct TensorNode {
    pub id: NodeId,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub requires_grad: bool,
    pub op: Op,
}

impl TensorNode {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Append-only computation tape. Confined to one unit of execution;
/// distinct graphs may run in parallel over shared read-only inputs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<TensorNode>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Decompose `shape` around `axis` into (outer, extent, inner) so that the
/// flat index of element (o, a, i) is `(o * extent + a) * inner + i`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&TensorNode> {
        self.nodes.get(id.0).ok_or(TensorError::UnknownNode { op: "node", id })
    }

    pub fn values(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub(crate) fn nodes(&self) -> &[TensorNode] {
        &self.nodes
    }

    fn check_id(&self, op: &'static str, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode { op, id })
        }
    }

    /// Insert a leaf tensor. Only leaves may be marked `requires_grad`;
    /// interior nodes inherit it from their parents.
    pub fn leaf(
        &mut self,
        values: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        let expected = numel(&shape);
        if values.len() != expected {
            return Err(TensorError::LengthMismatch { shape, got: values.len(), expected });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "leaf",
                shape,
                reason: "extents must be positive".into(),
            });
        }
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, values: Vec<f32>, shape: Vec<usize>) -> Result<NodeId> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, value: f32) -> Result<NodeId> {
        self.leaf(vec![value], vec![1], false)
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f32>, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(TensorNode { id, shape, values, requires_grad, op });
        id
    }

    /// Append the result of `op`, after verifying it is finite. The
    /// requires-grad flag is inherited from the parents.
    pub(crate) fn emit(&mut self, shape: Vec<usize>, values: Vec<f32>, op: Op) -> Result<NodeId> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name(), index });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(shape, values, requires_grad, op))
    }

    pub(crate) fn binary_pre(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(&TensorNode, &TensorNode)> {
        self.check_id(op, a)?;
        self.check_id(op, b)?;
        Ok((&self.nodes[a.0], &self.nodes[b.0]))
    }

    pub(crate) fn unary_pre(&self, op: &'static str, a: NodeId) -> Result<&TensorNode> {
        self.check_id(op, a)?;
        Ok(&self.nodes[a.0])
    }
}

#[cfg(test)]
mod tests;
