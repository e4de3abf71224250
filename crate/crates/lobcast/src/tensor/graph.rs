//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! tape. Nodes are topologically ordered by construction (an operation can
//! only consume tensors that already exist), so [`Graph::backward`] is a
//! single reverse sweep that visits each node exactly once. The graph is
//! meant to live for one forward/backward cycle and be dropped afterwards;
//! parameters persist outside the graph as [`Array`]s and are re-bound as
//! leaves each pass.
//!
//! Everything is single-threaded and sequential, so replaying the same
//! inputs produces bit-identical values and gradients.

use std::cell::{Cell, RefCell};
use std::fmt;

use super::array::Array;

/// Errors from recording or differentiating tensor operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    IndexOutOfRange {
        index: usize,
        rows: usize,
    },
    NonScalarLoss {
        shape: Vec<usize>,
    },
    DoubleBackward,
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::IndexOutOfRange { index, rows } => {
                write!(f, "row index {index} out of range for table with {rows} rows")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::DoubleBackward => {
                write!(f, "backward already ran on this graph")
            }
        }
    }
}

impl std::error::Error for TensorError {}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Sin { x: usize },
    Sqrt { x: usize },
    MatMul { a: usize, b: usize },
    Softmax { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    Sum { x: usize, axis: usize },
    Transpose { x: usize, a: usize, b: usize },
    Reshape { x: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    GatherRows { table: usize, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Tape of recorded operations for one forward/backward cycle.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

/// Handle to one node of a [`Graph`]. Cheap to copy; all data lives on the
/// graph. Values are immutable once recorded.
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a differentiable input. Its gradient is available after
    /// [`Graph::backward`].
    pub fn leaf(&self, array: Array) -> Tensor<'_> {
        self.push(Op::Leaf, array.shape().to_vec(), array.into_data(), true)
    }

    /// Record a non-differentiable input (data, masks, transform constants).
    pub fn constant(&self, array: Array) -> Tensor<'_> {
        self.push(Op::Leaf, array.shape().to_vec(), array.into_data(), false)
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.constant(Array::scalar(v))
    }

    fn push(&self, op: Op, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool) -> Tensor<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            shape,
            values,
            grad: None,
            needs_grad,
        });
        Tensor { graph: self, id }
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Propagate `d(loss)/d(node)` to every node that requires gradients.
    ///
    /// `loss` must hold exactly one element. A second call on the same graph
    /// is rejected: gradients accumulate in place, so re-running would
    /// silently double them.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<(), TensorError> {
        assert!(std::ptr::eq(loss.graph, self), "tensor from a different graph");
        if self.backward_done.get() {
            return Err(TensorError::DoubleBackward);
        }
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].values.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss.id].shape.clone(),
            });
        }
        self.backward_done.set(true);
        nodes[loss.id].grad = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            if !nodes[i].needs_grad || nodes[i].grad.is_none() {
                continue;
            }
            let dy = nodes[i].grad.clone().expect("checked above");
            let op = nodes[i].op.clone();
            let out_shape = nodes[i].shape.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    backward_linear_pair(&mut nodes, a, b, &dy, &out_shape, 1.0, 1.0);
                }
                Op::Sub { a, b } => {
                    backward_linear_pair(&mut nodes, a, b, &dy, &out_shape, 1.0, -1.0);
                }
                Op::Mul { a, b } => {
                    let sa = broadcast_strides(&nodes[a].shape, &out_shape);
                    let sb = broadcast_strides(&nodes[b].shape, &out_shape);
                    let mut ga = vec![0.0; nodes[a].values.len()];
                    let mut gb = vec![0.0; nodes[b].values.len()];
                    {
                        let av = &nodes[a].values;
                        let bv = &nodes[b].values;
                        for_each_broadcast2(&out_shape, &sa, &sb, |flat, ia, ib| {
                            ga[ia] += dy[flat] * bv[ib];
                            gb[ib] += dy[flat] * av[ia];
                        });
                    }
                    if nodes[a].needs_grad {
                        add_into(ensure_grad(&mut nodes[a]), &ga);
                    }
                    if nodes[b].needs_grad {
                        add_into(ensure_grad(&mut nodes[b]), &gb);
                    }
                }
                Op::Div { a, b } => {
                    let sa = broadcast_strides(&nodes[a].shape, &out_shape);
                    let sb = broadcast_strides(&nodes[b].shape, &out_shape);
                    let mut ga = vec![0.0; nodes[a].values.len()];
                    let mut gb = vec![0.0; nodes[b].values.len()];
                    {
                        let av = &nodes[a].values;
                        let bv = &nodes[b].values;
                        for_each_broadcast2(&out_shape, &sa, &sb, |flat, ia, ib| {
                            let inv = 1.0 / bv[ib];
                            ga[ia] += dy[flat] * inv;
                            gb[ib] -= dy[flat] * av[ia] * inv * inv;
                        });
                    }
                    if nodes[a].needs_grad {
                        add_into(ensure_grad(&mut nodes[a]), &ga);
                    }
                    if nodes[b].needs_grad {
                        add_into(ensure_grad(&mut nodes[b]), &gb);
                    }
                }
                Op::Scale { x, c } => {
                    if nodes[x].needs_grad {
                        let gx: Vec<f64> = dy.iter().map(|d| d * c).collect();
                        add_into(ensure_grad(&mut nodes[x]), &gx);
                    }
                }
                Op::Relu { x } => {
                    if nodes[x].needs_grad {
                        // Subgradient at exactly 0 is 0.
                        let gx: Vec<f64> = nodes[x]
                            .values
                            .iter()
                            .zip(&dy)
                            .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                            .collect();
                        add_into(ensure_grad(&mut nodes[x]), &gx);
                    }
                }
                Op::Sin { x } => {
                    if nodes[x].needs_grad {
                        let gx: Vec<f64> = nodes[x]
                            .values
                            .iter()
                            .zip(&dy)
                            .map(|(&v, &d)| d * v.cos())
                            .collect();
                        add_into(ensure_grad(&mut nodes[x]), &gx);
                    }
                }
                Op::Sqrt { x } => {
                    if nodes[x].needs_grad {
                        let y = nodes[i].values.clone();
                        let gx: Vec<f64> =
                            y.iter().zip(&dy).map(|(&yv, &d)| d / (2.0 * yv)).collect();
                        add_into(ensure_grad(&mut nodes[x]), &gx);
                    }
                }
                Op::MatMul { a, b } => {
                    backward_matmul(&mut nodes, a, b, i, &dy);
                }
                Op::Softmax { x, axis } => {
                    if nodes[x].needs_grad {
                        let y = nodes[i].values.clone();
                        let (outer, lane, inner) = lane_split(&out_shape, axis);
                        let mut gx = vec![0.0; y.len()];
                        for o in 0..outer {
                            for q in 0..inner {
                                let base = o * lane * inner + q;
                                let mut dot = 0.0;
                                for t in 0..lane {
                                    let j = base + t * inner;
                                    dot += y[j] * dy[j];
                                }
                                for t in 0..lane {
                                    let j = base + t * inner;
                                    gx[j] = y[j] * (dy[j] - dot);
                                }
                            }
                        }
                        add_into(ensure_grad(&mut nodes[x]), &gx);
                    }
                }
                Op::Mean { x, axis } | Op::Sum { x, axis } => {
                    if nodes[x].needs_grad {
                        let in_shape = nodes[x].shape.clone();
                        let (outer, lane, inner) = lane_split(&in_shape, axis);
                        let w = if matches!(nodes[i].op, Op::Mean { .. }) {
                            1.0 / lane as f64
                        } else {
                            1.0
                        };
                        let mut gx = vec![0.0; nodes[x].values.len()];
                        for o in 0..outer {
                            for q in 0..inner {
                                let d = dy[o * inner + q] * w;
                                let base = o * lane * inner + q;
                                for t in 0..lane {
                                    gx[base + t * inner] = d;
                                }
                            }
                        }
                        add_into(ensure_grad(&mut nodes[x]), &gx);
                    }
                }
                Op::Transpose { x, a, b } => {
                    if nodes[x].needs_grad {
                        // Swapping the same axes again inverts the permutation.
                        let (_, gx) = transpose_copy(&dy, &out_shape, a, b);
                        add_into(ensure_grad(&mut nodes[x]), &gx);
                    }
                }
                Op::Reshape { x } => {
                    if nodes[x].needs_grad {
                        add_into(ensure_grad(&mut nodes[x]), &dy);
                    }
                }
                Op::Narrow { x, axis, start } => {
                    if nodes[x].needs_grad {
                        let in_shape = nodes[x].shape.clone();
                        let (outer, lane, inner) = lane_split(&in_shape, axis);
                        let len = out_shape[axis];
                        let gx = ensure_grad(&mut nodes[x]);
                        for o in 0..outer {
                            for t in 0..len {
                                let src = (o * len + t) * inner;
                                let dst = (o * lane + start + t) * inner;
                                for q in 0..inner {
                                    gx[dst + q] += dy[src + q];
                                }
                            }
                        }
                    }
                }
                Op::Concat { xs, axis } => {
                    let (outer, lane, inner) = lane_split(&out_shape, axis);
                    let mut offset = 0;
                    for &xid in &xs {
                        let part_lane = nodes[xid].shape[axis];
                        if nodes[xid].needs_grad {
                            let mut gx = vec![0.0; nodes[xid].values.len()];
                            for o in 0..outer {
                                for t in 0..part_lane {
                                    let src = (o * lane + offset + t) * inner;
                                    let dst = (o * part_lane + t) * inner;
                                    gx[dst..dst + inner]
                                        .copy_from_slice(&dy[src..src + inner]);
                                }
                            }
                            add_into(ensure_grad(&mut nodes[xid]), &gx);
                        }
                        offset += part_lane;
                    }
                }
                Op::GatherRows { table, indices } => {
                    if nodes[table].needs_grad {
                        let width = nodes[table].shape[1];
                        let gt = ensure_grad(&mut nodes[table]);
                        for (r, &idx) in indices.iter().enumerate() {
                            let src = r * width;
                            let dst = idx * width;
                            for c in 0..width {
                                gt[dst + c] += dy[src + c];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn ensure_grad(node: &mut Node) -> &mut Vec<f64> {
    if node.grad.is_none() {
        node.grad = Some(vec![0.0; node.values.len()]);
    }
    node.grad.as_mut().expect("just ensured")
}

fn add_into(acc: &mut [f64], contrib: &[f64]) {
    debug_assert_eq!(acc.len(), contrib.len());
    for (a, c) in acc.iter_mut().zip(contrib) {
        *a += c;
    }
}

/// Shared backward for Add/Sub: contributions are `wa*dy` and `wb*dy`,
/// reduced over broadcast axes.
fn backward_linear_pair(
    nodes: &mut [Node],
    a: usize,
    b: usize,
    dy: &[f64],
    out_shape: &[usize],
    wa: f64,
    wb: f64,
) {
    for (id, w) in [(a, wa), (b, wb)] {
        if !nodes[id].needs_grad {
            continue;
        }
        let strides = broadcast_strides(&nodes[id].shape, out_shape);
        let mut gx = vec![0.0; nodes[id].values.len()];
        for_each_broadcast1(out_shape, &strides, |flat, ix| {
            gx[ix] += w * dy[flat];
        });
        add_into(ensure_grad(&mut nodes[id]), &gx);
    }
}

impl<'g> Tensor<'g> {
    /// Graph handle of this tensor's node.
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].values.len()
    }

    /// Copy of the node's values.
    pub fn value(&self) -> Array {
        let nodes = self.graph.nodes.borrow();
        Array::new(nodes[self.id].shape.clone(), nodes[self.id].values.clone())
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        assert_eq!(nodes[self.id].values.len(), 1, "item() on non-scalar");
        nodes[self.id].values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.graph.nodes.borrow()[self.id]
            .values
            .iter()
            .all(|v| v.is_finite())
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self) -> Option<Array> {
        let nodes = self.graph.nodes.borrow();
        nodes[self.id]
            .grad
            .as_ref()
            .map(|g| Array::new(nodes[self.id].shape.clone(), g.clone()))
    }

    fn same_graph(&self, other: &Tensor<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "tensors from different graphs"
        );
    }

    fn binary(
        self,
        rhs: Tensor<'g>,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Tensor<'g>, TensorError> {
        self.same_graph(&rhs);
        let (out_shape, values, needs);
        {
            let nodes = self.graph.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[rhs.id]);
            out_shape = broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| {
                TensorError::ShapeMismatch {
                    op: name,
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                }
            })?;
            let sa = broadcast_strides(&na.shape, &out_shape);
            let sb = broadcast_strides(&nb.shape, &out_shape);
            let mut out = vec![0.0; out_shape.iter().product()];
            for_each_broadcast2(&out_shape, &sa, &sb, |flat, ia, ib| {
                out[flat] = f(na.values[ia], nb.values[ib]);
            });
            values = out;
            needs = na.needs_grad || nb.needs_grad;
        }
        Ok(self
            .graph
            .push(make(self.id, rhs.id), out_shape, values, needs))
    }

    pub fn add(self, rhs: Tensor<'g>) -> Result<Tensor<'g>, TensorError> {
        self.binary(rhs, "add", |a, b| Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(self, rhs: Tensor<'g>) -> Result<Tensor<'g>, TensorError> {
        self.binary(rhs, "sub", |a, b| Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(self, rhs: Tensor<'g>) -> Result<Tensor<'g>, TensorError> {
        self.binary(rhs, "mul", |a, b| Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(self, rhs: Tensor<'g>) -> Result<Tensor<'g>, TensorError> {
        self.binary(rhs, "div", |a, b| Op::Div { a, b }, |x, y| x / y)
    }

    pub fn scale(self, c: f64) -> Tensor<'g> {
        let (shape, values, needs) = self.unary_map(|v| v * c);
        self.graph
            .push(Op::Scale { x: self.id, c }, shape, values, needs)
    }

    pub fn relu(self) -> Tensor<'g> {
        let (shape, values, needs) = self.unary_map(|v| v.max(0.0));
        self.graph
            .push(Op::Relu { x: self.id }, shape, values, needs)
    }

    pub fn sin(self) -> Tensor<'g> {
        let (shape, values, needs) = self.unary_map(f64::sin);
        self.graph
            .push(Op::Sin { x: self.id }, shape, values, needs)
    }

    pub fn sqrt(self) -> Tensor<'g> {
        let (shape, values, needs) = self.unary_map(f64::sqrt);
        self.graph
            .push(Op::Sqrt { x: self.id }, shape, values, needs)
    }

    fn unary_map(&self, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>, bool) {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        (
            n.shape.clone(),
            n.values.iter().map(|&v| f(v)).collect(),
            n.needs_grad,
        )
    }

    /// Matrix product over the trailing two axes. Leading batch axes must
    /// match or broadcast from size 1.
    pub fn matmul(self, rhs: Tensor<'g>) -> Result<Tensor<'g>, TensorError> {
        self.same_graph(&rhs);
        let (out_shape, values, needs);
        {
            let nodes = self.graph.nodes.borrow();
            let (na, nb) = (&nodes[self.id], &nodes[rhs.id]);
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            };
            if na.shape.len() < 2 || nb.shape.len() < 2 {
                return Err(mismatch());
            }
            let (m, ka) = (na.shape[na.shape.len() - 2], na.shape[na.shape.len() - 1]);
            let (kb, n) = (nb.shape[nb.shape.len() - 2], nb.shape[nb.shape.len() - 1]);
            if ka != kb {
                return Err(mismatch());
            }
            let batch_a = &na.shape[..na.shape.len() - 2];
            let batch_b = &nb.shape[..nb.shape.len() - 2];
            let batch = broadcast_shape(batch_a, batch_b).ok_or_else(mismatch)?;
            let sa = broadcast_strides(batch_a, &batch);
            let sb = broadcast_strides(batch_b, &batch);
            let mut shape = batch.clone();
            shape.extend([m, n]);
            let mut out = vec![0.0; shape.iter().product()];
            for_each_broadcast2(&batch, &sa, &sb, |flat, ia, ib| {
                let a_mat = &na.values[ia * m * ka..(ia + 1) * m * ka];
                let b_mat = &nb.values[ib * ka * n..(ib + 1) * ka * n];
                mm_acc(a_mat, b_mat, m, ka, n, &mut out[flat * m * n..(flat + 1) * m * n]);
            });
            out_shape = shape;
            values = out;
            needs = na.needs_grad || nb.needs_grad;
        }
        Ok(self.graph.push(
            Op::MatMul { a: self.id, b: rhs.id },
            out_shape,
            values,
            needs,
        ))
    }

    /// Numerically stable softmax along `axis`: outputs are positive and
    /// sum to 1 along the axis.
    pub fn softmax(self, axis: usize) -> Tensor<'g> {
        let (shape, values, needs);
        {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert!(axis < n.shape.len(), "softmax axis {axis} out of range");
            let (outer, lane, inner) = lane_split(&n.shape, axis);
            let mut out = vec![0.0; n.values.len()];
            for o in 0..outer {
                for q in 0..inner {
                    let base = o * lane * inner + q;
                    let mut max = f64::NEG_INFINITY;
                    for t in 0..lane {
                        max = max.max(n.values[base + t * inner]);
                    }
                    let mut sum = 0.0;
                    for t in 0..lane {
                        let e = (n.values[base + t * inner] - max).exp();
                        out[base + t * inner] = e;
                        sum += e;
                    }
                    for t in 0..lane {
                        out[base + t * inner] /= sum;
                    }
                }
            }
            shape = n.shape.clone();
            values = out;
            needs = n.needs_grad;
        }
        self.graph
            .push(Op::Softmax { x: self.id, axis }, shape, values, needs)
    }

    pub fn mean(self, axis: usize) -> Tensor<'g> {
        self.reduce(axis, true)
    }

    pub fn sum(self, axis: usize) -> Tensor<'g> {
        self.reduce(axis, false)
    }

    fn reduce(self, axis: usize, mean: bool) -> Tensor<'g> {
        let (shape, values, needs);
        {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert!(axis < n.shape.len(), "reduce axis {axis} out of range");
            let (outer, lane, inner) = lane_split(&n.shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for q in 0..inner {
                    let base = o * lane * inner + q;
                    let mut s = 0.0;
                    for t in 0..lane {
                        s += n.values[base + t * inner];
                    }
                    out[o * inner + q] = if mean { s / lane as f64 } else { s };
                }
            }
            let mut sh = n.shape.clone();
            sh.remove(axis);
            shape = sh;
            values = out;
            needs = n.needs_grad;
        }
        let op = if mean {
            Op::Mean { x: self.id, axis }
        } else {
            Op::Sum { x: self.id, axis }
        };
        self.graph.push(op, shape, values, needs)
    }

    /// Mean over all elements, as a rank-0 scalar.
    pub fn mean_all(self) -> Tensor<'g> {
        let n = self.numel();
        self.flatten().sum(0).scale(1.0 / n as f64).reshape(&[]).expect("scalar reshape")
    }

    /// Sum over all elements, as a rank-0 scalar.
    pub fn sum_all(self) -> Tensor<'g> {
        self.flatten().sum(0).reshape(&[]).expect("scalar reshape")
    }

    fn flatten(self) -> Tensor<'g> {
        let n = self.numel();
        self.reshape(&[n]).expect("flatten")
    }

    pub fn transpose(self, a: usize, b: usize) -> Tensor<'g> {
        let (shape, values, needs);
        {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert!(
                a < n.shape.len() && b < n.shape.len(),
                "transpose axes out of range"
            );
            let (sh, vals) = transpose_copy(&n.values, &n.shape, a, b);
            shape = sh;
            values = vals;
            needs = n.needs_grad;
        }
        self.graph
            .push(Op::Transpose { x: self.id, a, b }, shape, values, needs)
    }

    /// Swap the trailing two axes.
    pub fn t(self) -> Tensor<'g> {
        let rank = self.shape().len();
        assert!(rank >= 2, "t() needs rank >= 2");
        self.transpose(rank - 2, rank - 1)
    }

    /// Same values in a new shape; element count must be preserved.
    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'g>, TensorError> {
        let (values, needs, old_shape);
        {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            if shape.iter().product::<usize>() != n.values.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            values = n.values.clone();
            needs = n.needs_grad;
            old_shape = n.shape.clone();
        }
        let _ = old_shape;
        Ok(self
            .graph
            .push(Op::Reshape { x: self.id }, shape.to_vec(), values, needs))
    }

    /// Contiguous slab `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Tensor<'g> {
        let (shape, values, needs);
        {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert!(axis < n.shape.len(), "narrow axis out of range");
            assert!(
                start + len <= n.shape[axis],
                "narrow [{start}, {}) exceeds extent {}",
                start + len,
                n.shape[axis]
            );
            let (outer, lane, inner) = lane_split(&n.shape, axis);
            let mut out = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for t in 0..len {
                    let src = (o * lane + start + t) * inner;
                    let dst = (o * len + t) * inner;
                    out[dst..dst + inner].copy_from_slice(&n.values[src..src + inner]);
                }
            }
            let mut sh = n.shape.clone();
            sh[axis] = len;
            shape = sh;
            values = out;
            needs = n.needs_grad;
        }
        self.graph.push(
            Op::Narrow { x: self.id, axis, start },
            shape,
            values,
            needs,
        )
    }

    /// Select rows of a rank-2 table; the gradient scatter-adds back into
    /// the selected rows (repeats accumulate).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Tensor<'g>, TensorError> {
        let (shape, values, needs);
        {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            assert_eq!(n.shape.len(), 2, "gather_rows needs a rank-2 table");
            let (rows, width) = (n.shape[0], n.shape[1]);
            let mut out = Vec::with_capacity(indices.len() * width);
            for &idx in indices {
                if idx >= rows {
                    return Err(TensorError::IndexOutOfRange { index: idx, rows });
                }
                out.extend_from_slice(&n.values[idx * width..(idx + 1) * width]);
            }
            shape = vec![indices.len(), width];
            values = out;
            needs = n.needs_grad;
        }
        Ok(self.graph.push(
            Op::GatherRows {
                table: self.id,
                indices: indices.to_vec(),
            },
            shape,
            values,
            needs,
        ))
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<'g>(parts: &[Tensor<'g>], axis: usize) -> Result<Tensor<'g>, TensorError> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let graph = parts[0].graph;
    let (shape, values, needs);
    {
        let nodes = graph.nodes.borrow();
        let first = &nodes[parts[0].id];
        assert!(axis < first.shape.len(), "concat axis out of range");
        let mut lane_total = 0;
        let mut any_grad = false;
        for p in parts {
            assert!(std::ptr::eq(p.graph, graph), "tensors from different graphs");
            let n = &nodes[p.id];
            let mut expect = n.shape.clone();
            if expect.len() != first.shape.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: n.shape.clone(),
                });
            }
            expect[axis] = first.shape[axis];
            if expect != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: n.shape.clone(),
                });
            }
            lane_total += n.shape[axis];
            any_grad |= n.needs_grad;
        }
        let (outer, _, inner) = lane_split(&first.shape, axis);
        let mut sh = first.shape.clone();
        sh[axis] = lane_total;
        let mut out = vec![0.0; outer * lane_total * inner];
        let mut offset = 0;
        for p in parts {
            let n = &nodes[p.id];
            let part_lane = n.shape[axis];
            for o in 0..outer {
                for t in 0..part_lane {
                    let src = (o * part_lane + t) * inner;
                    let dst = (o * lane_total + offset + t) * inner;
                    out[dst..dst + inner].copy_from_slice(&n.values[src..src + inner]);
                }
            }
            offset += part_lane;
        }
        shape = sh;
        values = out;
        needs = any_grad;
    }
    Ok(graph.push(
        Op::Concat {
            xs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        shape,
        values,
        needs,
    ))
}

// ── shape helpers ──────────────────────────────────────────────────────

/// `(product of extents before axis, extent at axis, product after)`.
fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Right-aligned broadcast of two shapes; None if any pair of extents
/// disagrees with neither being 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Strides of `shape` aligned to `out_shape`, 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visit every element of `out_shape` with the flat offsets of two
/// broadcast operands, in row-major order.
fn for_each_broadcast2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

fn for_each_broadcast1(out_shape: &[usize], sx: &[usize], mut f: impl FnMut(usize, usize)) {
    for_each_broadcast2(out_shape, sx, sx, |flat, ix, _| f(flat, ix));
}

/// `out += a(m×k) · b(k×n)` into a zeroed slice.
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                o_row[j] += av * b_row[j];
            }
        }
    }
}

/// `out(m×k) += dc(m×n) · b(k×n)ᵀ`
fn mm_acc_nt(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let d_row = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += d_row[j] * b_row[j];
            }
            out[i * k + p] += s;
        }
    }
}

/// `out(k×n) += a(m×k)ᵀ · dc(m×n)`
fn mm_acc_tn(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let d_row = &dc[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                o_row[j] += av * d_row[j];
            }
        }
    }
}

fn backward_matmul(nodes: &mut [Node], a: usize, b: usize, out: usize, dy: &[f64]) {
    let a_shape = nodes[a].shape.clone();
    let b_shape = nodes[b].shape.clone();
    let out_shape = nodes[out].shape.clone();
    let m = a_shape[a_shape.len() - 2];
    let k = a_shape[a_shape.len() - 1];
    let n = b_shape[b_shape.len() - 1];
    let batch = out_shape[..out_shape.len() - 2].to_vec();
    let sa = broadcast_strides(&a_shape[..a_shape.len() - 2], &batch);
    let sb = broadcast_strides(&b_shape[..b_shape.len() - 2], &batch);
    let a_vals = nodes[a].values.clone();
    let b_vals = nodes[b].values.clone();
    let mut ga = vec![0.0; a_vals.len()];
    let mut gb = vec![0.0; b_vals.len()];
    for_each_broadcast2(&batch, &sa, &sb, |flat, ia, ib| {
        let d = &dy[flat * m * n..(flat + 1) * m * n];
        mm_acc_nt(
            d,
            &b_vals[ib * k * n..(ib + 1) * k * n],
            m,
            k,
            n,
            &mut ga[ia * m * k..(ia + 1) * m * k],
        );
        mm_acc_tn(
            &a_vals[ia * m * k..(ia + 1) * m * k],
            d,
            m,
            k,
            n,
            &mut gb[ib * k * n..(ib + 1) * k * n],
        );
    });
    if nodes[a].needs_grad {
        add_into(ensure_grad(&mut nodes[a]), &ga);
    }
    if nodes[b].needs_grad {
        add_into(ensure_grad(&mut nodes[b]), &gb);
    }
}

/// Copy with two axes swapped; returns (new shape, new data).
fn transpose_copy(data: &[f64], shape: &[usize], a: usize, b: usize) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    if a == b {
        return (out_shape, data.to_vec());
    }
    // Row-major strides of the source, permuted to destination axis order.
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    src_strides.swap(a, b);
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    if numel == 0 {
        return (out_shape, out);
    }
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for item in out.iter_mut() {
        *item = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= src_strides[d] * out_shape[d];
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr2(rows: &[&[f64]]) -> Array {
        Array::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let eye = g.constant(arr2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(arr2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let out = eye.matmul(m).unwrap();
        assert_eq!(out.value().data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let g = Graph::new();
        let a = g.constant(arr2(&[&[1.0, 2.0]]));
        let b = g.constant(arr2(&[&[3.0], &[4.0]]));
        let out = a.matmul(b).unwrap();
        assert_eq!(out.shape(), vec![1, 1]);
        assert_eq!(out.item(), 11.0);
    }

    #[test]
    fn matmul_inner_extent_mismatch() {
        let g = Graph::new();
        let a = g.constant(Array::zeros(&[2, 3]));
        let b = g.constant(Array::zeros(&[2, 2]));
        assert!(matches!(
            a.matmul(b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_batched_broadcast() {
        // (2,1,2,2) x (1,3,2,2): batch broadcasts to (2,3).
        let g = Graph::new();
        let a = g.constant(Array::new(
            vec![2, 1, 2, 2],
            vec![1., 0., 0., 1., 2., 0., 0., 2.],
        ));
        let b = g.constant(Array::new(
            vec![1, 3, 2, 2],
            (0..12).map(|v| v as f64).collect(),
        ));
        let out = a.matmul(b).unwrap();
        assert_eq!(out.shape(), vec![2, 3, 2, 2]);
        let v = out.value();
        // First batch (identity x b0) = b0; fourth (2I x b0) = 2*b0.
        assert_eq!(&v.data()[0..4], &[0., 1., 2., 3.]);
        assert_eq!(&v.data()[12..16], &[0., 2., 4., 6.]);
    }

    #[test]
    fn grad_of_sum_matmul_is_ones_times_b_transpose() {
        let g = Graph::new();
        let a = g.leaf(arr2(&[&[0.5, -1.0], &[2.0, 0.25]]));
        let b_arr = arr2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = g.constant(b_arr.clone());
        let loss = a.matmul(b).unwrap().sum_all();
        g.backward(loss).unwrap();
        let grad = a.grad().unwrap();
        // d(sum(AB))/dA = ones · Bᵀ: each row is the column sums of Bᵀ rows.
        for r in 0..2 {
            for c in 0..2 {
                let expect: f64 = (0..2).map(|j| b_arr.at(c, j)).sum();
                assert!((grad.at(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_known_ratios() {
        let g = Graph::new();
        let x = g.constant(Array::from_vec(vec![0.0, 0.0, 0.0]));
        let y = x.softmax(0).value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Array::from_vec(vec![
            1.0_f64.ln(),
            2.0_f64.ln(),
            3.0_f64.ln(),
        ]));
        let y = x.softmax(0).value();
        assert!((y.data()[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 6.0).abs() < 1e-15);
        assert!((y.data()[2] - 3.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let g = Graph::new();
        let x = g.constant(Array::from_vec(vec![1000.0, 0.0]));
        let y = x.softmax(0).value();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-12);
    }

    #[test]
    fn relu_values_and_gradient_mask() {
        let g = Graph::new();
        let x = g.leaf(Array::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        let loss = y.sum_all();
        g.backward(loss).unwrap();
        // Subgradient at 0 is 0.
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gather_repeated_row_accumulates() {
        let g = Graph::new();
        let table = g.leaf(arr2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let picked = table.gather_rows(&[0, 0]).unwrap();
        assert_eq!(picked.shape(), vec![2, 2]);
        let loss = picked.sum_all();
        g.backward(loss).unwrap();
        assert_eq!(table.grad().unwrap().data(), &[2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let g = Graph::new();
        let table = g.constant(Array::zeros(&[2, 3]));
        let err = table.gather_rows(&[5]).map(|_| ()).unwrap_err();
        assert_eq!(err, TensorError::IndexOutOfRange { index: 5, rows: 2 });
    }

    #[test]
    fn reshape_preserves_order_and_mean_of_ones() {
        let g = Graph::new();
        let x = g.constant(Array::new(vec![2, 3], (0..6).map(|v| v as f64).collect()));
        let y = x.reshape(&[3, 2]).unwrap();
        assert_eq!(y.value().data(), &[0., 1., 2., 3., 4., 5.]);
        let ones = g.constant(Array::ones(&[4, 5]));
        let m = ones.mean(1);
        assert_eq!(m.shape(), vec![4]);
        assert_eq!(m.value().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let g = Graph::new();
        let x = g.leaf(Array::from_vec(vec![1.0, 2.0]));
        let y = x.scale(2.0);
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let loss = y.sum_all();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss).unwrap_err(), TensorError::DoubleBackward);
    }

    #[test]
    fn broadcast_add_row_and_reduction() {
        let g = Graph::new();
        let x = g.leaf(Array::zeros(&[3, 2]));
        let row = g.leaf(Array::from_vec(vec![10.0, 20.0]));
        let y = x.add(row).unwrap();
        assert_eq!(y.value().row(2), &[10.0, 20.0]);
        let loss = y.sum_all();
        g.backward(loss).unwrap();
        // The row was used by every one of the 3 output rows.
        assert_eq!(row.grad().unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn transpose_and_narrow_roundtrip() {
        let g = Graph::new();
        let x = g.constant(Array::new(vec![2, 3], (0..6).map(|v| v as f64).collect()));
        let t = x.t();
        assert_eq!(t.shape(), vec![3, 2]);
        assert_eq!(t.value().data(), &[0., 3., 1., 4., 2., 5.]);
        let mid = x.narrow(1, 1, 2);
        assert_eq!(mid.shape(), vec![2, 2]);
        assert_eq!(mid.value().data(), &[1., 2., 4., 5.]);
    }

    #[test]
    fn concat_then_backward_slices() {
        let g = Graph::new();
        let a = g.leaf(arr2(&[&[1.0], &[2.0]]));
        let b = g.leaf(arr2(&[&[3.0], &[4.0]]));
        let joined = concat(&[a, b], 1).unwrap();
        assert_eq!(joined.shape(), vec![2, 2]);
        let loss = joined.narrow(1, 1, 1).sum_all();
        g.backward(loss).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.0, 0.0]);
        assert_eq!(b.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let g = Graph::new();
            let x = g.leaf(Array::from_vec(vec![0.3, -0.7, 1.9]));
            let w = g.leaf(arr2(&[&[0.1, 0.2, 0.3]]));
            let y = w
                .matmul(x.reshape(&[3, 1]).unwrap())
                .unwrap()
                .sin()
                .scale(2.5)
                .sum_all();
            g.backward(y).unwrap();
            (y.item(), x.grad().unwrap().data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(g1, g2);
    }
}
