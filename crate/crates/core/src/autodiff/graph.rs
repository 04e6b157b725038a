use super::{AutodiffError, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    /// Sum of all elements into a scalar.
    Sum(NodeId),
    /// Scalar repeated to a shape.
    Expand(NodeId),
    /// `[m x n] -> [1 x n]`
    SumRows(NodeId),
    /// `[1 x n] -> [m x n]`
    BroadcastRows(NodeId),
    /// `[m x n] -> [m x 1]`
    SumCols(NodeId),
    /// `[m x 1] -> [m x n]`
    BroadcastCols(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize },
    /// Embeds a matrix into a zero matrix of `total` columns at `start`.
    PadCols { input: NodeId, start: usize },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf | Constant => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Transpose(a) | Relu(a) | Exp(a) | Log(a)
            | Sqrt(a) | Sum(a) | Expand(a) | SumRows(a) | BroadcastRows(a) | SumCols(a)
            | BroadcastCols(a) => vec![*a],
            ConcatCols(parts) => parts.clone(),
            SliceCols { input, .. } | PadCols { input, .. } => vec![*input],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A single-threaded computation tape.
///
/// Nodes are appended in construction order, which is always a valid
/// topological order for reverse accumulation. Backward rules are themselves
/// recorded as graph operations, so gradients can be differentiated again.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn require_matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if !a.is_matrix() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: Vec::new(),
        });
    }
    Ok(())
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Drops every node created after the first `len`.
    pub(crate) fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| -x);
        self.push("neg", v, Op::Neg(a))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c))
    }

    /// Adds a constant.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        require_matrix("transpose", self.value(a))?;
        let v = self.value(a).transpose();
        self.push("transpose", v, Op::Transpose(a))
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push("log", v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::sqrt);
        self.push("sqrt", v, Op::Sqrt(a))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(AutodiffError::Empty { op: "mean" });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Repeats a scalar node to `shape`.
    pub fn expand(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if va.numel() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "expand",
                lhs: va.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = Tensor::full(shape, va.item());
        self.push("expand", v, Op::Expand(a))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        require_matrix("sum_rows", va)?;
        let (m, n) = (va.rows(), va.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, &x) in out.iter_mut().zip(va.row_slice(r)) {
                *o += x;
            }
        }
        self.push("sum_rows", Tensor::matrix(1, n, out)?, Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        let va = self.value(a);
        if !va.is_matrix() || va.rows() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_rows",
                lhs: va.shape().to_vec(),
                rhs: vec![m],
            });
        }
        let n = va.cols();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(va.data());
        }
        self.push(
            "broadcast_rows",
            Tensor::matrix(m, n, out)?,
            Op::BroadcastRows(a),
        )
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        require_matrix("sum_cols", va)?;
        let out: Vec<f64> = (0..va.rows()).map(|r| va.row_slice(r).iter().sum()).collect();
        let m = out.len();
        self.push("sum_cols", Tensor::matrix(m, 1, out)?, Op::SumCols(a))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let va = self.value(a);
        if !va.is_matrix() || va.cols() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_cols",
                lhs: va.shape().to_vec(),
                rhs: vec![n],
            });
        }
        let m = va.rows();
        let mut out = Vec::with_capacity(m * n);
        for &x in va.data() {
            out.extend(std::iter::repeat_n(x, n));
        }
        self.push(
            "broadcast_cols",
            Tensor::matrix(m, n, out)?,
            Op::BroadcastCols(a),
        )
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Empty { op: "concat_cols" });
        };
        let m = self.value(first).shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if !v.is_matrix() || v.rows() != m {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(first).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(
            "concat_cols",
            Tensor::matrix(m, total, out)?,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let va = self.value(a);
        if !va.is_matrix() || start + width > va.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                lhs: va.shape().to_vec(),
                rhs: vec![start, width],
            });
        }
        let v = va.slice_cols(start, width);
        self.push(
            "slice_cols",
            v,
            Op::SliceCols { input: a, start },
        )
    }

    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let va = self.value(a);
        if !va.is_matrix() || start + va.cols() > total {
            return Err(AutodiffError::ShapeMismatch {
                op: "pad_cols",
                lhs: va.shape().to_vec(),
                rhs: vec![start, total],
            });
        }
        let (m, w) = (va.rows(), va.cols());
        let mut out = vec![0.0; m * total];
        for r in 0..m {
            out[r * total + start..r * total + start + w].copy_from_slice(va.row_slice(r));
        }
        self.push(
            "pad_cols",
            Tensor::matrix(m, total, out)?,
            Op::PadCols { input: a, start },
        )
    }

    // Composite operations.

    /// `x[m x n] + b[1 x n]` broadcast over rows.
    pub fn add_row_vector(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let m = self.value(x).shape().first().copied().unwrap_or(0);
        let bb = self.broadcast_rows(b, m)?;
        self.add(x, bb)
    }

    /// Row-wise max, detached from the graph.
    fn row_max_constant(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        require_matrix("softmax", v)?;
        let maxes: Vec<f64> = (0..v.rows())
            .map(|r| v.row_slice(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Ok(self.constant(Tensor::column(&maxes)))
    }

    fn shift_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).shape().get(1).copied().unwrap_or(0);
        let maxes = self.row_max_constant(x)?;
        let mb = self.broadcast_cols(maxes, n)?;
        self.sub(x, mb)
    }

    /// Row-wise softmax, computed as `exp(x - max) / sum exp(x - max)`.
    ///
    /// The max is a constant shift, so it contributes nothing to the gradient.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).shape().get(1).copied().unwrap_or(0);
        let shifted = self.shift_rows(x)?;
        let e = self.exp(shifted)?;
        let s = self.sum_cols(e)?;
        let sb = self.broadcast_cols(s, n)?;
        self.div(e, sb)
    }

    /// Row-wise `log softmax`, `(x - max) - log sum exp(x - max)`.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).shape().get(1).copied().unwrap_or(0);
        let shifted = self.shift_rows(x)?;
        let e = self.exp(shifted)?;
        let s = self.sum_cols(e)?;
        let ls = self.log(s)?;
        let lb = self.broadcast_cols(ls, n)?;
        self.sub(shifted, lb)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Euclidean norm of all elements.
    pub fn norm2(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.dot(a, a)?;
        self.sqrt(sq)
    }

    /// Vector-Jacobian product of node `idx` given its adjoint `g`.
    ///
    /// Returns one `(parent, contribution)` pair per parent flagged in
    /// `relevant`. Contributions are recorded as graph nodes.
    pub(crate) fn vjp(
        &mut self,
        idx: usize,
        g: NodeId,
        relevant: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[idx].op.clone();
        let out = NodeId(idx);
        let want = |p: NodeId| relevant[p.0];
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    res.push((a, g));
                }
                if want(b) {
                    res.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    res.push((a, self.mul(g, b)?));
                }
                if want(b) {
                    res.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                if want(a) {
                    res.push((a, self.div(g, b)?));
                }
                if want(b) {
                    // d(a/b)/db = -(a/b)/b
                    let go = self.mul(g, out)?;
                    let q = self.div(go, b)?;
                    res.push((b, self.neg(q)?));
                }
            }
            Op::Neg(a) => res.push((a, self.neg(g)?)),
            Op::Scale(a, c) => res.push((a, self.scale(g, c)?)),
            Op::AddScalar(a) => res.push((a, g)),
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if want(b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(g)?)),
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                res.push((a, self.mul(g, m)?));
            }
            Op::Exp(a) => res.push((a, self.mul(g, out)?)),
            Op::Log(a) => res.push((a, self.div(g, a)?)),
            Op::Sqrt(a) => {
                let half = self.scale(g, 0.5)?;
                res.push((a, self.div(half, out)?));
            }
            Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                res.push((a, self.expand(g, &shape)?));
            }
            Op::Expand(a) => res.push((a, self.sum(g)?)),
            Op::SumRows(a) => {
                let m = self.value(a).rows();
                res.push((a, self.broadcast_rows(g, m)?));
            }
            Op::BroadcastRows(a) => res.push((a, self.sum_rows(g)?)),
            Op::SumCols(a) => {
                let n = self.value(a).cols();
                res.push((a, self.broadcast_cols(g, n)?));
            }
            Op::BroadcastCols(a) => res.push((a, self.sum_cols(g)?)),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    if want(p) {
                        res.push((p, self.slice_cols(g, offset, w)?));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { input, start, .. } => {
                let total = self.value(input).cols();
                res.push((input, self.pad_cols(g, start, total)?));
            }
            Op::PadCols { input, start, .. } => {
                let w = self.value(input).cols();
                res.push((input, self.slice_cols(g, start, w)?));
            }
        }
        Ok(res)
    }
}
