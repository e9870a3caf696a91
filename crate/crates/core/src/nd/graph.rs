//! Computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built symbolically: leaves are placeholders bound to
//! tensors at [`Graph::evaluate`] time, every other node applies one of a
//! small closed set of operations to earlier nodes. Node ids therefore
//! form a topological order by construction.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Leaf values supplied to [`Graph::evaluate`].
pub type Bindings = HashMap<NodeId, Tensor>;

/// Gradients of a scalar root with respect to differentiable leaves.
pub type Gradients = HashMap<NodeId, Tensor>;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf(String),
    Constant(Tensor),
    /// Elementwise; the right operand may also be a vector matching the trailing axis.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[m, k] x [k, n]`.
    MatMul(NodeId, NodeId),
    /// `x w + b` with `b` broadcast over rows.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Neg(NodeId),
    /// Sum of all elements, producing a scalar.
    Sum(NodeId),
    Mean(NodeId),
    /// Reduces the trailing axis.
    SumLast(NodeId),
    Slice { x: NodeId, start: usize, end: usize },
    Concat(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Transpose(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    /// Row-wise `log sum exp` over the entries selected by `mask` (same shape as `x`).
    LogSumExpMasked { x: NodeId, mask: Arc<[bool]> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Neg(_) => "neg",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
            Op::Slice { .. } => "slice",
            Op::Concat(..) => "concat",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Transpose(_) => "transpose",
            Op::Clamp { .. } => "clamp",
            Op::LogSumExpMasked { .. } => "logsumexp_masked",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf(_) | Op::Constant(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Concat(a, b) => {
                vec![a, b]
            }
            Op::Affine { x, w, b } => vec![x, w, b],
            Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Neg(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Transpose(a) => vec![a],
            Op::Slice { x, .. } | Op::Clamp { x, .. } | Op::LogSumExpMasked { x, .. } => vec![x],
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.ops[id.0]
    }

    fn push(&mut self, op: Op) -> NodeId {
        for input in op.inputs() {
            assert!(input.0 < self.ops.len(), "node {} is not part of this graph", input.0);
        }
        self.evaluated = false;
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn sum_last(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumLast(a))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::Slice { x, start, end })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.push(Op::Offset(a, shift))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi, "clamp bounds out of order");
        self.push(Op::Clamp { x, lo, hi })
    }

    pub fn logsumexp_masked(&mut self, x: NodeId, mask: impl Into<Arc<[bool]>>) -> NodeId {
        self.push(Op::LogSumExpMasked {
            x,
            mask: mask.into(),
        })
    }

    /// Value of `id` from the last successful [`Graph::evaluate`].
    ///
    /// Panics if the graph has not been evaluated since it was last modified.
    pub fn value(&self, id: NodeId) -> &Tensor {
        assert!(self.evaluated, "graph has not been evaluated");
        &self.values[id.0]
    }

    /// Runs the forward pass, caching every intermediate for [`Graph::gradients`].
    pub fn evaluate(&mut self, mut bindings: Bindings) -> Result<()> {
        self.evaluated = false;
        self.values.clear();
        self.values.reserve(self.ops.len());
        for i in 0..self.ops.len() {
            let op = &self.ops[i];
            let out = match op {
                Op::Leaf(name) => bindings
                    .remove(&NodeId(i))
                    .ok_or_else(|| Error::State(format!("leaf {i} ('{name}') is not bound")))?,
                Op::Constant(t) => t.clone(),
                _ => forward(i, op, &self.values)?,
            };
            if !out.is_finite() {
                return Err(Error::NumericOverflow {
                    node: i,
                    op: op.name(),
                });
            }
            self.values.push(out);
        }
        self.evaluated = true;
        Ok(())
    }

    /// Back-propagates from the scalar `root`, returning `d root / d leaf` for
    /// every leaf whose bound tensor has `requires_grad` set.
    pub fn gradients(&self, root: NodeId) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::State("gradients requested before evaluate".into()));
        }
        if self.values[root.0].len() != 1 {
            return Err(Error::State(format!(
                "root node {} is not scalar (shape {:?})",
                root.0,
                self.values[root.0].shape()
            )));
        }

        let n = root.0 + 1;
        let mut needs = vec![false; n];
        for i in 0..n {
            needs[i] = match &self.ops[i] {
                Op::Leaf(_) => self.values[i].requires_grad(),
                Op::Constant(_) => false,
                op => op.inputs().iter().any(|j| needs[j.0]),
            };
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            let op = &self.ops[i];
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    node: i,
                    op: op.name(),
                });
            }
            if let Op::Leaf(_) = op {
                grads[i] = Some(g);
                continue;
            }
            backward(i, op, &g, &self.values, &needs, &mut grads);
        }

        let mut out = Gradients::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Leaf(_) = op {
                let value = &self.values[i];
                if !value.requires_grad() {
                    continue;
                }
                let data = match grads.get_mut(i).and_then(Option::take) {
                    Some(g) => g,
                    None => vec![0.0; value.len()],
                };
                out.insert(NodeId(i), Tensor::from_parts(value.shape().to_vec(), data));
            }
        }
        Ok(out)
    }
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail,
    }
}

/// `Some(false)` for equal shapes, `Some(true)` when `b` broadcasts along the trailing axis of `a`.
fn broadcast(a: &[usize], b: &[usize]) -> Option<bool> {
    if a == b {
        Some(false)
    } else if b.len() == 1 && !a.is_empty() && a.last() == b.first() {
        Some(true)
    } else {
        None
    }
}

fn elementwise(
    node: usize,
    op: &Op,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let Some(bcast) = broadcast(a.shape(), b.shape()) else {
        return Err(shape_err(
            node,
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    };
    let data = if bcast {
        let m = b.len();
        a.data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, b.data()[k % m]))
            .collect()
    } else {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    };
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn as_matrix(node: usize, op: &Op, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(shape_err(node, op, format!("expected a matrix, got {:?}", t.shape()))),
    }
}

fn forward(i: usize, op: &Op, values: &[Tensor]) -> Result<Tensor> {
    let v = |id: &NodeId| &values[id.0];
    let out = match op {
        Op::Leaf(_) | Op::Constant(_) => unreachable!("leaves are bound, not computed"),
        Op::Add(a, b) => elementwise(i, op, v(a), v(b), |x, y| x + y)?,
        Op::Sub(a, b) => elementwise(i, op, v(a), v(b), |x, y| x - y)?,
        Op::Mul(a, b) => elementwise(i, op, v(a), v(b), |x, y| x * y)?,
        Op::MatMul(a, b) => {
            let (m, k) = as_matrix(i, op, v(a))?;
            let (k2, n) = as_matrix(i, op, v(b))?;
            if k != k2 {
                return Err(shape_err(i, op, format!("inner extents {k} vs {k2}")));
            }
            let mut c = vec![0.0; m * n];
            kernels::gemm(m, k, n, v(a).data(), false, v(b).data(), false, &mut c, 0.0);
            Tensor::from_parts(vec![m, n], c)
        }
        Op::Affine { x, w, b } => {
            let (m, k) = as_matrix(i, op, v(x))?;
            let (k2, n) = as_matrix(i, op, v(w))?;
            if k != k2 || v(b).shape() != [n] {
                return Err(shape_err(
                    i,
                    op,
                    format!(
                        "x {:?}, w {:?}, b {:?}",
                        v(x).shape(),
                        v(w).shape(),
                        v(b).shape()
                    ),
                ));
            }
            let mut c: Vec<f64> = v(b).data().iter().copied().cycle().take(m * n).collect();
            kernels::gemm(m, k, n, v(x).data(), false, v(w).data(), false, &mut c, 1.0);
            Tensor::from_parts(vec![m, n], c)
        }
        Op::Tanh(a) => map(v(a), f64::tanh),
        Op::Exp(a) => map(v(a), f64::exp),
        Op::Log(a) => map(v(a), f64::ln),
        Op::Square(a) => map(v(a), |x| x * x),
        Op::Neg(a) => map(v(a), |x| -x),
        Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
        Op::Mean(a) => {
            let t = v(a);
            if t.is_empty() {
                return Err(shape_err(i, op, "mean of an empty tensor".into()));
            }
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        }
        Op::SumLast(a) => {
            let t = v(a);
            if t.rank() == 0 {
                return Err(shape_err(i, op, "cannot reduce a scalar".into()));
            }
            let shape = t.shape()[..t.rank() - 1].to_vec();
            let data = (0..t.outer()).map(|r| t.row(r).iter().sum()).collect();
            Tensor::from_parts(shape, data)
        }
        Op::Slice { x, start, end } => {
            let t = v(x);
            let m = t.last_dim();
            if t.rank() == 0 || start >= end || *end > m {
                return Err(shape_err(
                    i,
                    op,
                    format!("range {start}..{end} of {:?}", t.shape()),
                ));
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = end - start;
            let data = (0..t.outer())
                .flat_map(|r| t.row(r)[*start..*end].iter().copied())
                .collect();
            Tensor::from_parts(shape, data)
        }
        Op::Concat(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let ra = ta.rank();
            if ra == 0 || tb.rank() != ra || ta.shape()[..ra - 1] != tb.shape()[..ra - 1] {
                return Err(shape_err(
                    i,
                    op,
                    format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                ));
            }
            let mut shape = ta.shape().to_vec();
            shape[ra - 1] += tb.last_dim();
            let mut data = Vec::with_capacity(ta.len() + tb.len());
            for r in 0..ta.outer() {
                data.extend_from_slice(ta.row(r));
                data.extend_from_slice(tb.row(r));
            }
            Tensor::from_parts(shape, data)
        }
        Op::Scale(a, c) => map(v(a), |x| x * c),
        Op::Offset(a, c) => map(v(a), |x| x + c),
        Op::Transpose(a) => {
            let (r, c) = as_matrix(i, op, v(a))?;
            Tensor::from_parts(vec![c, r], kernels::transpose(v(a).data(), r, c))
        }
        Op::Clamp { x, lo, hi } => map(v(x), |t| t.clamp(*lo, *hi)),
        Op::LogSumExpMasked { x, mask } => {
            let t = v(x);
            let (r, c) = as_matrix(i, op, t)?;
            if mask.len() != r * c {
                return Err(shape_err(i, op, format!("mask length {} for {r}x{c}", mask.len())));
            }
            let data = (0..r)
                .map(|row| {
                    let vals = t.row(row);
                    let sel = &mask[row * c..(row + 1) * c];
                    kernels::logsumexp(vals.iter().zip(sel).filter(|(_, &m)| m).map(|(&x, _)| x))
                })
                .collect();
            Tensor::from_parts(vec![r], data)
        }
    };
    Ok(out)
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], values: &[Tensor], id: NodeId) -> &'a mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; values[id.0].len()])
}

/// Sums a `[outer, m]` gradient into a length-`m` accumulator.
fn reduce_rows(acc: &mut [f64], g: impl Iterator<Item = f64>) {
    let m = acc.len();
    for (k, x) in g.enumerate() {
        acc[k % m] += x;
    }
}

fn backward(
    i: usize,
    op: &Op,
    g: &[f64],
    values: &[Tensor],
    needs: &[bool],
    grads: &mut [Option<Vec<f64>>],
) {
    let v = |id: NodeId| &values[id.0];
    let y = &values[i];
    match *op {
        Op::Leaf(_) | Op::Constant(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs[a.0] {
                let acc = accumulate(grads, values, a);
                acc.iter_mut().zip(g).for_each(|(s, &d)| *s += d);
            }
            if needs[b.0] {
                let acc = accumulate(grads, values, b);
                if acc.len() == g.len() {
                    acc.iter_mut().zip(g).for_each(|(s, &d)| *s += sign * d);
                } else {
                    reduce_rows(acc, g.iter().map(|&d| sign * d));
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let m = tb.len();
            if needs[a.0] {
                let acc = accumulate(grads, values, a);
                acc.iter_mut()
                    .enumerate()
                    .for_each(|(k, s)| *s += g[k] * tb.data()[k % m]);
            }
            if needs[b.0] {
                let acc = accumulate(grads, values, b);
                reduce_rows(acc, g.iter().zip(ta.data()).map(|(&d, &x)| d * x));
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (v(a).shape()[0], v(a).shape()[1]);
            let n = v(b).shape()[1];
            if needs[a.0] {
                let bd = v(b).data();
                let acc = accumulate(grads, values, a);
                kernels::gemm(m, n, k, g, false, bd, true, acc, 1.0);
            }
            if needs[b.0] {
                let ad = v(a).data();
                let acc = accumulate(grads, values, b);
                kernels::gemm(k, m, n, ad, true, g, false, acc, 1.0);
            }
        }
        Op::Affine { x, w, b } => {
            let (m, k) = (v(x).shape()[0], v(x).shape()[1]);
            let n = v(w).shape()[1];
            if needs[x.0] {
                let wd = v(w).data();
                let acc = accumulate(grads, values, x);
                kernels::gemm(m, n, k, g, false, wd, true, acc, 1.0);
            }
            if needs[w.0] {
                let xd = v(x).data();
                let acc = accumulate(grads, values, w);
                kernels::gemm(k, m, n, xd, true, g, false, acc, 1.0);
            }
            if needs[b.0] {
                reduce_rows(accumulate(grads, values, b), g.iter().copied());
            }
        }
        Op::Tanh(a) => unary(grads, values, needs, a, g, |k, d| d * (1.0 - y.data()[k].powi(2))),
        Op::Exp(a) => unary(grads, values, needs, a, g, |k, d| d * y.data()[k]),
        Op::Log(a) => {
            let x = v(a).data();
            unary(grads, values, needs, a, g, |k, d| d / x[k])
        }
        Op::Square(a) => {
            let x = v(a).data();
            unary(grads, values, needs, a, g, |k, d| 2.0 * x[k] * d)
        }
        Op::Neg(a) => unary(grads, values, needs, a, g, |_, d| -d),
        Op::Scale(a, c) => unary(grads, values, needs, a, g, |_, d| c * d),
        Op::Offset(a, _) => unary(grads, values, needs, a, g, |_, d| d),
        Op::Clamp { x, lo, hi } => {
            let xv = v(x).data();
            unary(grads, values, needs, x, g, |k, d| {
                if xv[k] >= lo && xv[k] <= hi {
                    d
                } else {
                    0.0
                }
            })
        }
        Op::Sum(a) => unary(grads, values, needs, a, g, |_, _| g[0]),
        Op::Mean(a) => {
            let n = v(a).len() as f64;
            unary(grads, values, needs, a, g, |_, _| g[0] / n)
        }
        Op::SumLast(a) => {
            let m = v(a).last_dim();
            unary(grads, values, needs, a, g, |k, _| g[k / m])
        }
        Op::Slice { x, start, end } => {
            if needs[x.0] {
                let m = v(x).last_dim();
                let w = end - start;
                let acc = accumulate(grads, values, x);
                for (r, chunk) in g.chunks(w).enumerate() {
                    for (j, &d) in chunk.iter().enumerate() {
                        acc[r * m + start + j] += d;
                    }
                }
            }
        }
        Op::Concat(a, b) => {
            let ma = v(a).last_dim();
            let mb = v(b).last_dim();
            let w = ma + mb;
            if needs[a.0] {
                let acc = accumulate(grads, values, a);
                for (r, chunk) in g.chunks(w).enumerate() {
                    for (j, &d) in chunk[..ma].iter().enumerate() {
                        acc[r * ma + j] += d;
                    }
                }
            }
            if needs[b.0] {
                let acc = accumulate(grads, values, b);
                for (r, chunk) in g.chunks(w).enumerate() {
                    for (j, &d) in chunk[ma..].iter().enumerate() {
                        acc[r * mb + j] += d;
                    }
                }
            }
        }
        Op::Transpose(a) => {
            if needs[a.0] {
                // y is [c, r]; its gradient transposes back to [r, c].
                let (c, r) = (y.shape()[0], y.shape()[1]);
                let gt = kernels::transpose(g, c, r);
                let acc = accumulate(grads, values, a);
                acc.iter_mut().zip(gt).for_each(|(s, d)| *s += d);
            }
        }
        Op::LogSumExpMasked { x, ref mask } => {
            if needs[x.0] {
                let xv = v(x);
                let c = xv.last_dim();
                let acc = accumulate(grads, values, x);
                for (k, s) in acc.iter_mut().enumerate() {
                    if mask[k] {
                        let r = k / c;
                        *s += g[r] * (xv.data()[k] - y.data()[r]).exp();
                    }
                }
            }
        }
    }
}

fn unary(
    grads: &mut [Option<Vec<f64>>],
    values: &[Tensor],
    needs: &[bool],
    a: NodeId,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if !needs[a.0] {
        return;
    }
    let acc = accumulate(grads, values, a);
    let scalar_out = g.len() == 1 && acc.len() != 1;
    for (k, s) in acc.iter_mut().enumerate() {
        let d = if scalar_out { g[0] } else { g[k.min(g.len() - 1)] };
        *s += f(k, d);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: Vec<(NodeId, Tensor)>) -> Bindings {
        pairs.into_iter().collect()
    }

    #[test]
    fn adds_vectors() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let y = g.leaf("y");
        let s = g.add(x, y);
        g.evaluate(bind(vec![
            (x, Tensor::vector(vec![1.0, 2.0])),
            (y, Tensor::vector(vec![3.0, 4.0])),
        ]))
        .unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    }

    #[test]
    fn tanh_of_zero_vector() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let t = g.tanh(x);
        g.evaluate(bind(vec![(x, Tensor::zeros(&[3]))])).unwrap();
        assert_eq!(g.value(t).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let sq = g.square(x);
        let s = g.sum(sq);
        g.evaluate(bind(vec![(x, Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad(true))]))
            .unwrap();
        assert_eq!(g.value(s).item(), 14.0);
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads[&x].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let s = g.sum(x);
        g.evaluate(bind(vec![(x, Tensor::vector(vec![0.3, -1.0, 2.0, 5.0, 7.0]).with_grad(true))]))
            .unwrap();
        assert_eq!(g.gradients(s).unwrap()[&x].data(), &[1.0; 5]);
    }

    #[test]
    fn fan_out_accumulates() {
        // root = sum(x * x) with x feeding both operands.
        let mut g = Graph::new();
        let x = g.leaf("x");
        let p = g.mul(x, x);
        let s = g.sum(p);
        g.evaluate(bind(vec![(x, Tensor::vector(vec![1.5, -2.0]).with_grad(true))]))
            .unwrap();
        assert_eq!(g.gradients(s).unwrap()[&x].data(), &[3.0, -4.0]);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let y = g.leaf("y");
        let s = g.add(x, y);
        let err = g
            .evaluate(bind(vec![(x, Tensor::zeros(&[2, 3])), (y, Tensor::zeros(&[2]))]))
            .unwrap_err();
        match err {
            Error::Shape { node, op, .. } => {
                assert_eq!(node, s.index());
                assert_eq!(op, "add");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overflow_names_node() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let e = g.exp(x);
        let err = g.evaluate(bind(vec![(x, Tensor::vector(vec![1000.0]))])).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { node, .. } if node == e.index()));

        let mut g = Graph::new();
        let x = g.leaf("x");
        let l = g.log(x);
        let err = g.evaluate(bind(vec![(x, Tensor::vector(vec![0.0]))])).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { node, .. } if node == l.index()));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let s = g.sum(x);
        assert!(matches!(g.gradients(s), Err(Error::State(_))));
    }

    #[test]
    fn unbound_leaf_is_state_error() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        g.sum(x);
        assert!(matches!(g.evaluate(Bindings::new()), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let t = g.tanh(x);
        g.evaluate(bind(vec![(x, Tensor::zeros(&[2]))])).unwrap();
        assert!(g.gradients(t).is_err());
    }

    #[test]
    fn trailing_axis_broadcast() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let b = g.leaf("b");
        let s = g.add(x, b);
        let total = g.sum(s);
        g.evaluate(bind(vec![
            (x, Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            (b, Tensor::vector(vec![10.0, 20.0]).with_grad(true)),
        ]))
        .unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(g.gradients(total).unwrap()[&b].data(), &[2.0, 2.0]);
    }

    #[test]
    fn masked_logsumexp_skips_unselected() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let l = g.logsumexp_masked(x, vec![false, true, true, true, false, true]);
        g.evaluate(bind(vec![(
            x,
            Tensor::matrix(2, 3, vec![100.0, 0.0, 0.0, 0.0, 100.0, 0.0]).unwrap(),
        )]))
        .unwrap();
        let v = g.value(l).data();
        assert!((v[0] - 2f64.ln()).abs() < 1e-15);
        assert!((v[1] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn evaluate_is_bit_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf("x");
            let w = g.leaf("w");
            let b = g.leaf("b");
            let a = g.affine(x, w, b);
            let t = g.tanh(a);
            let s = g.sum(t);
            (g, x, w, b, s)
        };
        let run = || {
            let (mut g, x, w, b, s) = build();
            g.evaluate(bind(vec![
                (x, Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.7, 1.1, -0.9]).unwrap()),
                (w, Tensor::matrix(3, 2, vec![0.5, -0.4, 0.3, 0.2, -0.1, 0.9]).unwrap()),
                (b, Tensor::vector(vec![0.01, -0.02])),
            ]))
            .unwrap();
            g.value(s).item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
