//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! The tape records every primitive application in construction order (which
//! is already topological) and replays it backwards to accumulate gradients.
//! A tape is built for one forward pass, consumed by `backward`, and dropped;
//! nothing persists between passes except the [`ParamStore`].

use std::collections::HashMap;

use super::matrix::{self, Matrix};
use super::param::{ParamId, ParamStore};
use crate::error::{MfnError, Result};

/// Handle to a value node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    SoftmaxRows { x: NodeId },
    Swish { x: NodeId },
    Sigmoid { x: NodeId },
    LnClamped { x: NodeId, floor: f64 },
    SumAll { x: NodeId },
    ColMean { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    StackRows { parts: Vec<NodeId> },
    BroadcastRow { row: NodeId, n: usize },
    AddRowBroadcast { x: NodeId, row: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
}

/// Records primitive applications and runs reverse accumulation.
#[derive(Default)]
pub struct Tape {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    grads: Vec<Option<Matrix>>,
    param_nodes: HashMap<ParamId, NodeId>,
    param_order: Vec<ParamId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops every node and gradient, returning the tape to its initial state.
    pub fn clear(&mut self) {
        self.values.clear();
        self.ops.clear();
        self.grads.clear();
        self.param_nodes.clear();
        self.param_order.clear();
    }

    pub fn value(&self, n: NodeId) -> &Matrix {
        &self.values[n.0]
    }

    /// Gradient accumulated at a node, if the loss reached it.
    pub fn grad(&self, n: NodeId) -> Option<&Matrix> {
        self.grads[n.0].as_ref()
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Matrix::scalar(v))
    }

    /// Registers a store parameter on the tape. Repeated registrations of the
    /// same parameter return the same node, so every use shares one gradient
    /// accumulator.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, n);
        self.param_order.push(id);
        n
    }

    // ── Primitives ───────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = matrix::transpose(self.value(x));
        self.push(v, Op::Transpose { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matrix::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matrix::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub { a, b }))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matrix::mul_elem(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MulElem { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = matrix::scale(self.value(x), c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = matrix::softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows { x })
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let v = matrix::swish(self.value(x));
        self.push(v, Op::Swish { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = matrix::sigmoid(self.value(x));
        self.push(v, Op::Sigmoid { x })
    }

    /// ln(max(x, floor)) elementwise; the gradient is zero where the clamp
    /// is active.
    pub fn ln_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        let v = matrix::ln_clamped(self.value(x), floor);
        self.push(v, Op::LnClamped { x, floor })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::scalar(matrix::sum_all(self.value(x)));
        self.push(v, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn col_mean(&mut self, x: NodeId) -> NodeId {
        let v = matrix::col_mean(self.value(x));
        self.push(v, Op::ColMean { x })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matrix::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::ConcatCols { a, b }))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = matrix::stack_rows(&mats)?;
        Ok(self.push(v, Op::StackRows { parts: parts.to_vec() }))
    }

    pub fn broadcast_row(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let v = matrix::broadcast_row(self.value(row), n)?;
        Ok(self.push(v, Op::BroadcastRow { row, n }))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let v = matrix::add_row_broadcast(self.value(x), self.value(row))?;
        Ok(self.push(v, Op::AddRowBroadcast { x, row }))
    }

    /// Row lookup: selects `ids` rows of `table` into a new matrix. Backward
    /// scatter-adds into the table rows, so tables may be parameters.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let mut rows = Vec::with_capacity(ids.len());
        for &i in ids {
            if i >= t.rows() {
                return Err(MfnError::Contract(format!(
                    "gather index {i} out of range for a {}x{} table",
                    t.rows(),
                    t.cols()
                )));
            }
            rows.push(t.row(i).to_vec());
        }
        let v = Matrix::from_rows(&rows);
        Ok(self.push(v, Op::Gather { table, ids: ids.to_vec() }))
    }

    // ── Reverse pass ─────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar loss node. Every node the loss
    /// depends on receives its gradient; parameter gradients can then be
    /// exported with [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            let (r, c) = self.value(loss).shape();
            return Err(MfnError::Contract(format!(
                "backward requires a scalar loss node, got {r}x{c}"
            )));
        }
        acc(&mut self.grads, loss, Matrix::scalar(1.0));

        for i in (0..self.ops.len()).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.ops[i] {
                Op::Const | Op::Param(_) => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let bt = matrix::transpose(self.value(b));
                    let da = matrix::matmul(&g, &bt)?;
                    let at = matrix::transpose(self.value(a));
                    let db = matrix::matmul(&at, &g)?;
                    acc(&mut self.grads, a, da);
                    acc(&mut self.grads, b, db);
                }
                Op::Transpose { x } => {
                    let x = *x;
                    acc(&mut self.grads, x, matrix::transpose(&g));
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    acc(&mut self.grads, a, g.clone());
                    acc(&mut self.grads, b, g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    acc(&mut self.grads, a, g.clone());
                    acc(&mut self.grads, b, matrix::scale(&g, -1.0));
                }
                Op::MulElem { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = matrix::mul_elem(&g, self.value(b))?;
                    let db = matrix::mul_elem(&g, self.value(a))?;
                    acc(&mut self.grads, a, da);
                    acc(&mut self.grads, b, db);
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    acc(&mut self.grads, x, matrix::scale(&g, c));
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let y = &self.values[i];
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let mut dot = 0.0;
                        for c in 0..y.cols() {
                            dot += g.get(r, c) * y.get(r, c);
                        }
                        for c in 0..y.cols() {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(&mut self.grads, x, dx);
                }
                Op::Swish { x } => {
                    let x = *x;
                    let input = self.value(x);
                    let dx = Matrix::from_fn(input.rows(), input.cols(), |r, c| {
                        let v = input.get(r, c);
                        let s = matrix::sigmoid_scalar(v);
                        g.get(r, c) * s * (1.0 + v * (1.0 - s))
                    });
                    acc(&mut self.grads, x, dx);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let y = &self.values[i];
                    let dx = Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                        let s = y.get(r, c);
                        g.get(r, c) * s * (1.0 - s)
                    });
                    acc(&mut self.grads, x, dx);
                }
                Op::LnClamped { x, floor } => {
                    let (x, floor) = (*x, *floor);
                    let input = self.value(x);
                    let dx = Matrix::from_fn(input.rows(), input.cols(), |r, c| {
                        let v = input.get(r, c);
                        if v > floor {
                            g.get(r, c) / v
                        } else {
                            0.0
                        }
                    });
                    acc(&mut self.grads, x, dx);
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let input = self.value(x);
                    let gv = g.item();
                    let dx = Matrix::from_fn(input.rows(), input.cols(), |_, _| gv);
                    acc(&mut self.grads, x, dx);
                }
                Op::ColMean { x } => {
                    let x = *x;
                    let input = self.value(x);
                    let inv = 1.0 / input.rows() as f64;
                    let dx =
                        Matrix::from_fn(input.rows(), input.cols(), |_, c| g.get(0, c) * inv);
                    acc(&mut self.grads, x, dx);
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let ca = self.value(a).cols();
                    let cb = self.value(b).cols();
                    let rows = g.rows();
                    let da = Matrix::from_fn(rows, ca, |r, c| g.get(r, c));
                    let db = Matrix::from_fn(rows, cb, |r, c| g.get(r, ca + c));
                    acc(&mut self.grads, a, da);
                    acc(&mut self.grads, b, db);
                }
                Op::StackRows { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(p).rows();
                        let cols = self.value(p).cols();
                        let dp = Matrix::from_fn(rows, cols, |r, c| g.get(offset + r, c));
                        offset += rows;
                        acc(&mut self.grads, p, dp);
                    }
                }
                Op::BroadcastRow { row, n } => {
                    let (row, n) = (*row, *n);
                    let cols = self.value(row).cols();
                    let mut drow = Matrix::zeros(1, cols);
                    for r in 0..n {
                        for c in 0..cols {
                            drow.set(0, c, drow.get(0, c) + g.get(r, c));
                        }
                    }
                    acc(&mut self.grads, row, drow);
                }
                Op::AddRowBroadcast { x, row } => {
                    let (x, row) = (*x, *row);
                    let cols = g.cols();
                    let mut drow = Matrix::zeros(1, cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            drow.set(0, c, drow.get(0, c) + g.get(r, c));
                        }
                    }
                    acc(&mut self.grads, x, g.clone());
                    acc(&mut self.grads, row, drow);
                }
                Op::Gather { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let t = self.value(table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (l, &idx) in ids.iter().enumerate() {
                        for c in 0..t.cols() {
                            dt.set(idx, c, dt.get(idx, c) + g.get(l, c));
                        }
                    }
                    acc(&mut self.grads, table, dt);
                }
            }
        }
        Ok(())
    }

    /// Adds each registered parameter's tape gradient into the store, in
    /// registration order. Parameters the loss never reached are untouched.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &id in &self.param_order {
            let node = self.param_nodes[&id];
            if let Some(g) = self.grads[node.0].as_ref() {
                store.add_to_grad(id, g);
            }
        }
    }

    /// Parameters registered on this tape, in registration order.
    pub fn registered_params(&self) -> &[ParamId] {
        &self.param_order
    }
}

fn acc(grads: &mut [Option<Matrix>], node: NodeId, delta: Matrix) {
    match &mut grads[node.0] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (gi, di) in g.data_mut().iter_mut().zip(delta.data().iter()) {
                *gi += di;
            }
        }
        None => grads[node.0] = Some(delta),
    }
}
