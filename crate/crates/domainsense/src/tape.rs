//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every forward operation pushes a node holding its operator, input node
//! ids, and the cached forward value.  Nodes are therefore in topological
//! order by construction, and a backward sweep is a single reverse pass that
//! accumulates adjoints (vector-Jacobian products).
//!
//! The one structural decision that shapes this module: **backward sweeps
//! emit tape nodes**, using the same operator set as the forward pass.  The
//! gradient of a loss is then itself a differentiable function on the tape,
//! so a second backward sweep through the first yields exact
//! Hessian-vector products — no separate forward-over-reverse machinery.
//!
//! Two consequences are worth knowing:
//!
//! - Operator derivatives that are only piecewise smooth capture their local
//!   slope as a constant.  The rectified linear unit records its 0/1 mask as
//!   a constant leaf; differentiating through the mask a second time
//!   correctly yields zero.  At an exact kink (pre-activation 0.0) the first
//!   derivative uses the subgradient 0, and a *strict* sweep — used when
//!   the result will be differentiated again — refuses instead of silently
//!   picking a branch.
//! - Backward sweeps grow the tape.  Callers that only want gradient values
//!   read the adjoints and then [`Tape::truncate`] back to the pre-sweep
//!   length.

use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::tensor::Tensor;

/// Index of a node on the tape.
pub type NodeId = usize;

/// Operator of a tape node, holding input node ids and any captured
/// constants (scalar factors, label indices, target shapes).
#[derive(Debug, Clone)]
pub enum Op {
    /// Constant data: inputs, targets, masks, seeds.
    Leaf,
    /// Parameter leaf, tagged with its registry segment index.
    Param { segment: usize },
    /// Matrix product.
    MatMul(NodeId, NodeId),
    /// Matrix transpose.
    Transpose(NodeId),
    /// Elementwise sum.
    Add(NodeId, NodeId),
    /// Elementwise difference.
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    /// Multiplication by a scalar constant.
    Scale(NodeId, f64),
    /// Addition of a scalar constant.
    AddScalar(NodeId, f64),
    /// Matrix plus a row vector broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// Column sums: `m x n -> n`.
    SumRows(NodeId),
    /// Row sums: `m x n -> m`.
    RowSums(NodeId),
    /// Vector repeated as matrix rows: `n -> m x n`.
    BroadcastRows(NodeId, usize),
    /// Vector repeated as matrix columns: `m -> m x n`.
    BroadcastCols(NodeId, usize),
    /// Each matrix row scaled by the matching vector entry.
    MulColBroadcast(NodeId, NodeId),
    /// Sum of all entries, producing a rank-0 scalar.
    SumAll(NodeId),
    /// Scalar broadcast to a target shape.
    BroadcastScalar(NodeId, Vec<usize>),
    /// Rectified linear unit.
    Relu(NodeId),
    /// Hyperbolic tangent.
    Tanh(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    /// Row-wise log-sum-exp: `m x c -> m`.
    LogSumExpRows(NodeId),
    /// Per-row label entry: `m x c -> m`.
    SelectLabels(NodeId, Vec<usize>),
    /// Adjoint of label selection: `m -> m x c`.
    ScatterLabels(NodeId, Vec<usize>, usize),
}

/// A tape entry: operator plus cached forward value.
#[derive(Debug, Clone)]
pub struct Node {
    op: Op,
    value: Tensor,
}

impl Node {
    /// The node's operator.
    pub fn op(&self) -> &Op {
        &self.op
    }

    /// The cached forward value.
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Adjoint node ids produced by one backward sweep.
///
/// `of(id)` is the tape node holding `d(output)/d(node id)`, present only
/// for nodes the output actually depends on.
#[derive(Debug)]
pub struct Adjoints {
    map: Vec<Option<NodeId>>,
}

impl Adjoints {
    /// Adjoint node of `id`, if the swept output depends on it.
    pub fn of(&self, id: NodeId) -> Option<NodeId> {
        self.map.get(id).copied().flatten()
    }
}

/// Append-only computation record.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<(usize, NodeId)>,
}

impl Tape {
    /// An empty tape.
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when no nodes have been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The node with the given id.
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Parameter leaves recorded so far, as `(segment index, node id)`.
    pub fn param_nodes(&self) -> &[(usize, NodeId)] {
        &self.param_nodes
    }

    /// Drops every node with id `>= len`, reclaiming the space a backward
    /// sweep added.  Panics if `len` exceeds the current node count.
    pub fn truncate(&mut self, len: usize) {
        assert!(len <= self.nodes.len(), "cannot truncate {} to {}", self.nodes.len(), len);
        self.nodes.truncate(len);
        self.param_nodes.retain(|(_, id)| *id < len);
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        id
    }

    /// Records a constant leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Records a parameter leaf carrying its registry segment index.
    pub fn param(&mut self, segment: usize, value: Tensor) -> NodeId {
        let id = self.push(Op::Param { segment }, value);
        self.param_nodes.push((segment, id));
        id
    }

    /// Matrix product node.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Transpose node.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), value))
    }

    /// Elementwise sum node.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Elementwise difference node.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product node.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Scalar-constant multiple node.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    /// Scalar-constant addition node.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).add_scalar(c);
        self.push(Op::AddScalar(a, c), value)
    }

    /// Matrix-plus-row-broadcast node.
    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let value = self.value(a).add_row_broadcast(self.value(row))?;
        Ok(self.push(Op::AddRowBroadcast(a, row), value))
    }

    /// Column-sum node.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).sum_rows()?;
        Ok(self.push(Op::SumRows(a), value))
    }

    /// Row-sum node.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).row_sums()?;
        Ok(self.push(Op::RowSums(a), value))
    }

    /// Row-broadcast node.
    pub fn broadcast_rows(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        let value = self.value(a).broadcast_rows(m)?;
        Ok(self.push(Op::BroadcastRows(a, m), value))
    }

    /// Column-broadcast node.
    pub fn broadcast_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let value = self.value(a).broadcast_cols(n)?;
        Ok(self.push(Op::BroadcastCols(a, n), value))
    }

    /// Row-scaling node.
    pub fn mul_col_broadcast(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul_col_broadcast(self.value(col))?;
        Ok(self.push(Op::MulColBroadcast(a, col), value))
    }

    /// Total-sum node (rank-0 result).
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).sum_all();
        self.push(Op::SumAll(a), value)
    }

    /// Scalar-broadcast node.
    pub fn broadcast_scalar(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).broadcast_scalar(&shape)?;
        Ok(self.push(Op::BroadcastScalar(a, shape), value))
    }

    /// Rectified-linear node.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).relu();
        self.push(Op::Relu(a), value)
    }

    /// Hyperbolic-tangent node.
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).tanh();
        self.push(Op::Tanh(a), value)
    }

    /// Row-softmax node.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).softmax_rows()?;
        Ok(self.push(Op::Softmax(a), value))
    }

    /// Row-log-sum-exp node.
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).log_sum_exp_rows()?;
        Ok(self.push(Op::LogSumExpRows(a), value))
    }

    /// Label-selection node.
    pub fn select_labels(&mut self, a: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).select_labels(&labels)?;
        Ok(self.push(Op::SelectLabels(a, labels), value))
    }

    /// Label-scatter node.
    pub fn scatter_labels(&mut self, a: NodeId, labels: Vec<usize>, classes: usize) -> Result<NodeId> {
        let value = self.value(a).scatter_labels(&labels, classes)?;
        Ok(self.push(Op::ScatterLabels(a, labels, classes), value))
    }

    /// Backward sweep from `output`, emitting adjoint nodes onto the tape.
    ///
    /// With `seed = None` the output must be a one-element tensor and is
    /// seeded with adjoint 1; otherwise the seed must match the output's
    /// shape (used to extract Jacobian rows).
    ///
    /// `strict` demands every swept operator be twice differentiable at the
    /// evaluation point, which is required when the produced adjoints will
    /// themselves be differentiated; a rectified linear unit with an exactly
    /// zero pre-activation then yields a capability error.
    pub fn backward(&mut self, output: NodeId, seed: Option<Tensor>, strict: bool) -> Result<Adjoints> {
        if output >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "backward from node {} but tape holds {}",
                output,
                self.nodes.len()
            )));
        }
        let seed_value = match seed {
            Some(t) => {
                if t.shape() != self.value(output).shape() {
                    return Err(Error::dimension(
                        "backward seed",
                        format!(
                            "seed shape {:?} vs output shape {:?}",
                            t.shape(),
                            self.value(output).shape()
                        ),
                    ));
                }
                t
            }
            None => {
                if !self.value(output).is_scalar() {
                    return Err(Error::Contract(format!(
                        "backward without a seed needs a scalar output, got shape {:?}",
                        self.value(output).shape()
                    )));
                }
                Tensor::full(self.value(output).shape(), 1.0)
            }
        };

        let mut map: Vec<Option<NodeId>> = vec![None; output + 1];
        map[output] = Some(self.leaf(seed_value));

        for id in (0..=output).rev() {
            let g = match map[id] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf | Op::Param { .. } => {}
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(g, bt)?;
                    self.accumulate(&mut map, a, da)?;
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, g)?;
                    self.accumulate(&mut map, b, db)?;
                }
                Op::Transpose(a) => {
                    let da = self.transpose(g)?;
                    self.accumulate(&mut map, a, da)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut map, a, g)?;
                    self.accumulate(&mut map, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut map, a, g)?;
                    let db = self.scale(g, -1.0);
                    self.accumulate(&mut map, b, db)?;
                }
                Op::Mul(a, b) => {
                    let da = self.mul(g, b)?;
                    self.accumulate(&mut map, a, da)?;
                    let db = self.mul(g, a)?;
                    self.accumulate(&mut map, b, db)?;
                }
                Op::Scale(a, c) => {
                    let da = self.scale(g, c);
                    self.accumulate(&mut map, a, da)?;
                }
                Op::AddScalar(a, _) => {
                    self.accumulate(&mut map, a, g)?;
                }
                Op::AddRowBroadcast(a, row) => {
                    self.accumulate(&mut map, a, g)?;
                    let drow = self.sum_rows(g)?;
                    self.accumulate(&mut map, row, drow)?;
                }
                Op::SumRows(a) => {
                    let m = self.value(a).rows()?;
                    let da = self.broadcast_rows(g, m)?;
                    self.accumulate(&mut map, a, da)?;
                }
                Op::RowSums(a) => {
                    let n = self.value(a).cols()?;
                    let da = self.broadcast_cols(g, n)?;
                    self.accumulate(&mut map, a, da)?;
                }
                Op::BroadcastRows(a, _) => {
                    let da = self.sum_rows(g)?;
                    self.accumulate(&mut map, a, da)?;
                }
                Op::BroadcastCols(a, _) => {
                    let da = self.row_sums(g)?;
                    self.accumulate(&mut map, a, da)?;
                }
                Op::MulColBroadcast(a, col) => {
                    let da = self.mul_col_broadcast(g, col)?;
                    self.accumulate(&mut map, a, da)?;
                    let ga = self.mul(g, a)?;
                    let dcol = self.row_sums(ga)?;
                    self.accumulate(&mut map, col, dcol)?;
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let da = self.broadcast_scalar(g, shape)?;
                    self.accumulate(&mut map, a, da)?;
                }
                Op::BroadcastScalar(a, _) => {
                    let da = self.sum_all(g);
                    self.accumulate(&mut map, a, da)?;
                }
                Op::Relu(a) => {
                    if strict && self.value(a).data().iter().any(|&v| v == 0.0) {
                        return Err(Error::Capability(
                            "exact second derivatives through relu are undefined at a zero \
                             pre-activation; use the finite-difference fallback"
                                .to_string(),
                        ));
                    }
                    // The 0/1 mask enters as a constant leaf: the second
                    // derivative of relu vanishes wherever it exists.
                    let mask = self.value(a).relu_mask();
                    let mask_id = self.leaf(mask);
                    let da = self.mul(g, mask_id)?;
                    self.accumulate(&mut map, a, da)?;
                }
                Op::Tanh(a) => {
                    // d/dx tanh(x) = 1 - tanh(x)^2, reusing the forward value.
                    let sq = self.mul(id, id)?;
                    let neg = self.scale(sq, -1.0);
                    let one_minus = self.add_scalar(neg, 1.0);
                    let da = self.mul(g, one_minus)?;
                    self.accumulate(&mut map, a, da)?;
                }
                Op::Softmax(z) => {
                    // dz = s * (g - rowsum(g * s)), with s the forward value.
                    let gs = self.mul(g, id)?;
                    let inner = self.row_sums(gs)?;
                    let c = self.value(id).cols()?;
                    let spread = self.broadcast_cols(inner, c)?;
                    let centered = self.sub(g, spread)?;
                    let dz = self.mul(id, centered)?;
                    self.accumulate(&mut map, z, dz)?;
                }
                Op::LogSumExpRows(z) => {
                    // dz_ij = g_i * softmax(z)_ij.
                    let s = self.softmax(z)?;
                    let dz = self.mul_col_broadcast(s, g)?;
                    self.accumulate(&mut map, z, dz)?;
                }
                Op::SelectLabels(z, labels) => {
                    let c = self.value(z).cols()?;
                    let dz = self.scatter_labels(g, labels, c)?;
                    self.accumulate(&mut map, z, dz)?;
                }
                Op::ScatterLabels(a, labels, _) => {
                    let da = self.select_labels(g, labels)?;
                    self.accumulate(&mut map, a, da)?;
                }
            }
        }
        Ok(Adjoints { map })
    }

    fn accumulate(&mut self, map: &mut [Option<NodeId>], target: NodeId, contribution: NodeId) -> Result<()> {
        map[target] = Some(match map[target] {
            None => contribution,
            Some(existing) => self.add(existing, contribution)?,
        });
        Ok(())
    }

    /// Assembles the flat parameter gradient from a backward sweep.
    ///
    /// Parameter segments the output does not depend on contribute zeros.
    pub fn param_gradient(&self, adjoints: &Adjoints, params: &ParameterVector) -> Result<Tensor> {
        let mut flat = vec![0.0; params.len()];
        for &(segment, node) in &self.param_nodes {
            if let Some(avid) = adjoints.of(node) {
                let seg = params
                    .registry()
                    .get(segment)
                    .ok_or_else(|| Error::Contract(format!("tape references unknown segment {}", segment)))?;
                let adj = self.value(avid);
                if adj.len() != seg.len {
                    return Err(Error::dimension(
                        "param_gradient",
                        format!("adjoint holds {} values for segment of {}", adj.len(), seg.len),
                    ));
                }
                for (i, &v) in adj.data().iter().enumerate() {
                    flat[seg.offset + i] += v;
                }
            }
        }
        Ok(Tensor::vector(flat))
    }

    /// Exact Hessian-vector product `H v` of a scalar output with respect to
    /// the parameters, by a second backward sweep through the first.
    ///
    /// The tape is restored to its pre-call length before returning.
    pub fn hessian_vector_product(
        &mut self,
        output: NodeId,
        params: &ParameterVector,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        if v.len() != params.len() {
            return Err(Error::dimension(
                "hessian_vector_product",
                format!("direction holds {} values for {} parameters", v.len(), params.len()),
            ));
        }
        let before = self.len();
        let result = self.hvp_inner(output, params, v);
        self.truncate(before);
        result
    }

    fn hvp_inner(&mut self, output: NodeId, params: &ParameterVector, v: &[f64]) -> Result<Vec<f64>> {
        // First sweep must be strict: its adjoints are differentiated again.
        let adjoints = self.backward(output, None, true)?;
        let param_nodes = self.param_nodes.clone();
        let mut dot: Option<NodeId> = None;
        for (segment, node) in param_nodes {
            let grad_node = match adjoints.of(node) {
                Some(g) => g,
                None => continue,
            };
            let seg = &params.registry()[segment];
            let slab = Tensor::new(seg.shape.clone(), v[seg.offset..seg.offset + seg.len].to_vec())?;
            let v_leaf = self.leaf(slab);
            let prod = self.mul(grad_node, v_leaf)?;
            let sum = self.sum_all(prod);
            dot = Some(match dot {
                None => sum,
                Some(acc) => self.add(acc, sum)?,
            });
        }
        let dot = match dot {
            Some(d) => d,
            // Output does not depend on any parameter: the Hessian is zero.
            None => return Ok(vec![0.0; params.len()]),
        };
        let second = self.backward(dot, None, false)?;
        let hv = self.param_gradient(&second, params)?;
        Ok(hv.data().to_vec())
    }
}
