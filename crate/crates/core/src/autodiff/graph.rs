use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    /// Sum of every entry, `1 x 1`.
    All,
    /// Column sums, `m x n -> 1 x n`.
    OverRows,
    /// Row sums, `m x n -> m x 1`.
    OverCols,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Exp,
    Log,
    Square,
    Clip { lo: f64, hi: f64 },
    Sum(Reduce),
    Concat,
    Slice { start: usize, len: usize },
    Transpose,
    LogSumExp,
    Dropout,
    GatherRows(Arc<[usize]>),
    ScatterRows { indices: Arc<[usize]>, rows: usize },
    NormalCdf,
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Var>,
    pub(crate) value: Tensor,
}

/// An eagerly evaluated, append-only computation graph.
///
/// Each primitive computes its value immediately and records itself. The
/// backward pass (see [`Graph::grad`]) appends its own primitive nodes, so
/// gradients are themselves differentiable.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

pub(crate) fn eval_op(op: &Op, inputs: &[&Tensor]) -> Tensor {
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul { ta, tb } => kernels::matmul(inputs[0], inputs[1], *ta, *tb),
        Op::Add => kernels::broadcast_binary(inputs[0], inputs[1], "add", |a, b| a + b),
        Op::Sub => kernels::broadcast_binary(inputs[0], inputs[1], "sub", |a, b| a - b),
        Op::Mul => kernels::broadcast_binary(inputs[0], inputs[1], "mul", |a, b| a * b),
        Op::Scale(c) => inputs[0].map(|v| c * v),
        Op::Tanh => inputs[0].map(f64::tanh),
        Op::Exp => inputs[0].map(f64::exp),
        Op::Log => inputs[0].map(kernels::floored_ln),
        Op::Square => inputs[0].map(|v| v * v),
        Op::Clip { lo, hi } => inputs[0].map(|v| v.max(*lo).min(*hi)),
        Op::Sum(Reduce::All) => kernels::sum_all(inputs[0]),
        Op::Sum(Reduce::OverRows) => kernels::sum_over_rows(inputs[0]),
        Op::Sum(Reduce::OverCols) => kernels::sum_over_cols(inputs[0]),
        Op::Concat => kernels::concat_cols(inputs),
        Op::Slice { start, len } => kernels::slice_cols(inputs[0], *start, *len),
        Op::Transpose => inputs[0].transpose(),
        Op::LogSumExp => kernels::logsumexp_rows(inputs[0]),
        Op::Dropout => {
            assert_eq!(
                inputs[0].shape(),
                inputs[1].shape(),
                "dropout mask shape mismatch"
            );
            kernels::broadcast_binary(inputs[0], inputs[1], "dropout", |a, m| a * m)
        }
        Op::GatherRows(idx) => kernels::gather_rows(inputs[0], idx),
        Op::ScatterRows { indices, rows } => kernels::scatter_add_rows(inputs[0], indices, *rows),
        Op::NormalCdf => inputs[0].map(kernels::normal_cdf),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Records an input tensor. Whether it is differentiated is decided by
    /// the `wrt` list passed to [`Graph::grad`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub(crate) fn push(&mut self, op: Op, inputs: Vec<Var>) -> Var {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            eval_op(&op, &vals)
        };
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        self.push(Op::MatMul { ta, tb }, vec![a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh, vec![a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp, vec![a])
    }

    /// Natural log with the argument floored at `1e-12`.
    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log, vec![a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square, vec![a])
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clip bounds reversed");
        self.push(Op::Clip { lo, hi }, vec![a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(Reduce::All), vec![a])
    }

    pub fn sum_over(&mut self, a: Var, how: Reduce) -> Var {
        self.push(Op::Sum(how), vec![a])
    }

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.push(Op::Slice { start, len }, vec![a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose, vec![a])
    }

    /// Row-wise log-sum-exp, `m x n -> m x 1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        self.push(Op::LogSumExp, vec![a])
    }

    /// Multiplies by an explicit, caller-drawn mask (already scaled by the
    /// keep probability).
    pub fn dropout(&mut self, a: Var, mask: Var) -> Var {
        self.push(Op::Dropout, vec![a, mask])
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        self.push(Op::GatherRows(indices.into()), vec![a])
    }

    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], rows: usize) -> Var {
        self.push(
            Op::ScatterRows {
                indices: indices.into(),
                rows,
            },
            vec![a],
        )
    }

    /// Standard normal CDF, elementwise.
    pub fn normal_cdf(&mut self, a: Var) -> Var {
        self.push(Op::NormalCdf, vec![a])
    }

    /// Row-wise log-softmax built from log-sum-exp.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let lse = self.logsumexp(a);
        self.sub(a, lse)
    }

    /// Row-wise softmax built from log-sum-exp.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    /// Broadcasts `a` to `rows x cols` by adding a zero tensor.
    pub(crate) fn expand(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        if self.shape(a) == (rows, cols) {
            return a;
        }
        let z = self.constant(Tensor::zeros(rows, cols));
        self.add(z, a)
    }

    /// Sums `a` down to `shape`, the adjoint of broadcasting.
    pub(crate) fn reduce_to(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let mut out = a;
        let (r, c) = self.shape(out);
        if r != shape.0 {
            debug_assert_eq!(shape.0, 1);
            out = self.sum_over(out, Reduce::OverRows);
        }
        if c != shape.1 {
            debug_assert_eq!(shape.1, 1);
            out = self.sum_over(out, Reduce::OverCols);
        }
        out
    }

    /// Recomputes every node from its recorded primitive, substituting new
    /// values for the given leaves. Other leaves keep their recorded values.
    pub fn replay(&self, overrides: &[(Var, Tensor)]) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Leaf => overrides
                    .iter()
                    .find(|(var, _)| var.0 == i)
                    .map(|(_, t)| t.clone())
                    .unwrap_or_else(|| node.value.clone()),
                _ => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    eval_op(&node.op, &ins)
                }
            };
            values.push(v);
        }
        values
    }

    /// True when every node lists only earlier nodes as inputs.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.inputs.iter().all(|v| v.0 < i))
    }
}
