//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a tape of operation records built per training step.
//! Forward values are computed eagerly when a node is appended; `backward`
//! walks the tape once in reverse and accumulates gradients additively into
//! zero-initialized buffers. Includes the stop-gradient and straight-through
//! constructs needed by quantized training.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op} at flat index {index}: value {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("gather index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows/cols of a rank-2 tensor; rank-1 tensors are treated as one row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.len() {
            1 => Some((1, self.shape[0])),
            2 => Some((self.shape[0], self.shape[1])),
            _ => None,
        }
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the tape; usable as an index into `backward`'s result.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum UnaryKind {
    LeakyRelu(u64), // slope stored as bits, see leaky_relu()
    Exp,
    Log,
    Square,
    Sqrt,
    Tanh,
    Softplus,
}

#[derive(Debug, Clone)]
// some payloads (the AddScalar constant, stop-grad and straight-through
// sources) are consumed at construction time and kept for Debug output
#[allow(dead_code)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Unary(NodeId, UnaryKind),
    StopGrad(NodeId),
    StraightThrough { pre: NodeId, quantized: NodeId },
    Sum(NodeId),
    Mean(NodeId),
    L2NormSq(NodeId),
    SumAxis(NodeId, usize),
    AddRow(NodeId, NodeId),
    DivRows(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    SliceCols { input: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation tape. Node inputs always precede the node.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).dims2().ok_or_else(|| AutodiffError::NotAMatrix {
            op: "matmul",
            shape: self.value(a).shape.clone(),
        })?;
        let (br, bc) = self.value(b).dims2().ok_or_else(|| AutodiffError::NotAMatrix {
            op: "matmul",
            shape: self.value(b).shape.clone(),
        })?;
        if ac != br {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape.clone(),
                right: self.value(b).shape.clone(),
            });
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, ar, ac, bc);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(ar, bc, out), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2().ok_or_else(|| AutodiffError::NotAMatrix {
            op: "transpose",
            shape: self.value(a).shape.clone(),
        })?;
        let src = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Transpose(a), Tensor::matrix(c, r, out), rg))
    }

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape == tb.shape {
            Ok(ta.shape.clone())
        } else if ta.is_scalar() {
            Ok(tb.shape.clone())
        } else if tb.is_scalar() {
            Ok(ta.shape.clone())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            })
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let shape = self.binary_shapes(op_name, a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = shape.iter().product();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let x = ta.data[if ta.data.len() == 1 { 0 } else { i }];
            let y = tb.data[if tb.data.len() == 1 { 0 } else { i }];
            *o = f(x, y);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(op, Tensor::new(shape, out), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|x| x + c).collect());
        let rg = self.requires_grad(a);
        self.push(Op::AddScalar(a, c), out, rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|x| x * c).collect());
        let rg = self.requires_grad(a);
        self.push(Op::MulScalar(a, c), out, rg)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.mul_scalar(a, -1.0)
    }

    fn unary(&mut self, a: NodeId, kind: UnaryKind) -> Result<NodeId> {
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.data.len());
        for (i, &x) in v.data.iter().enumerate() {
            let y = match kind {
                UnaryKind::LeakyRelu(bits) => {
                    let alpha = f64::from_bits(bits);
                    if x >= 0.0 { x } else { alpha * x }
                }
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => {
                    if x <= 0.0 {
                        return Err(AutodiffError::Domain { op: "log", index: i, value: x });
                    }
                    x.ln()
                }
                UnaryKind::Square => x * x,
                UnaryKind::Sqrt => {
                    if x <= 0.0 {
                        return Err(AutodiffError::Domain { op: "sqrt", index: i, value: x });
                    }
                    x.sqrt()
                }
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Softplus => softplus(x),
            };
            out.push(y);
        }
        let rg = self.requires_grad(a);
        let shape = v.shape.clone();
        Ok(self.push(Op::Unary(a, kind), Tensor::new(shape, out), rg))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        self.unary(a, UnaryKind::LeakyRelu(alpha.to_bits())).expect("leaky_relu is total")
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Exp).expect("exp is total")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Square).expect("square is total")
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, UnaryKind::Sqrt)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Tanh).expect("tanh is total")
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, UnaryKind::Softplus).expect("softplus is total")
    }

    /// Forward identity; contributes zero gradient to its input.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(Op::StopGrad(a), v, false)
    }

    /// Forward value of `quantized`; backward passes the output gradient
    /// unchanged into `pre` and nothing into `quantized`.
    pub fn straight_through(&mut self, pre: NodeId, quantized: NodeId) -> Result<NodeId> {
        if self.value(pre).shape != self.value(quantized).shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "straight_through",
                left: self.value(pre).shape.clone(),
                right: self.value(quantized).shape.clone(),
            });
        }
        let v = self.value(quantized).clone();
        let rg = self.requires_grad(pre);
        Ok(self.push(Op::StraightThrough { pre, quantized }, v, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        let rg = self.requires_grad(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let rg = self.requires_grad(a);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    pub fn l2_norm_sq(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().map(|x| x * x).sum();
        let rg = self.requires_grad(a);
        self.push(Op::L2NormSq(a), Tensor::scalar(s), rg)
    }

    /// Sum of a rank-2 tensor along `axis` (0 → column sums, 1 → row sums).
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let rank = self.value(a).shape.len();
        if rank != 2 || axis > 1 {
            return Err(AutodiffError::InvalidAxis { axis, rank });
        }
        let (r, c) = (self.value(a).shape[0], self.value(a).shape[1]);
        let src = &self.value(a).data;
        let out = if axis == 0 {
            let mut v = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    v[j] += src[i * c + j];
                }
            }
            v
        } else {
            (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect()
        };
        let rg = self.requires_grad(a);
        Ok(self.push(Op::SumAxis(a, axis), Tensor::vector(out), rg))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let n = self.value(a).shape[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.mul_scalar(s, 1.0 / n))
    }

    /// mat (m×n) + row (n), added to every row. Bias broadcast.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(mat).dims2().ok_or_else(|| AutodiffError::NotAMatrix {
            op: "add_row",
            shape: self.value(mat).shape.clone(),
        })?;
        if self.value(row).len() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                left: self.value(mat).shape.clone(),
                right: self.value(row).shape.clone(),
            });
        }
        let mut out = self.value(mat).data.clone();
        let rowv = &self.nodes[row.0].value.data;
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rowv[j];
            }
        }
        let rg = self.requires_grad(mat) || self.requires_grad(row);
        Ok(self.push(Op::AddRow(mat, row), Tensor::matrix(r, c, out), rg))
    }

    /// Divide each row i of mat (m×n) by denom[i].
    pub fn div_rows(&mut self, mat: NodeId, denom: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(mat).dims2().ok_or_else(|| AutodiffError::NotAMatrix {
            op: "div_rows",
            shape: self.value(mat).shape.clone(),
        })?;
        if self.value(denom).len() != r {
            return Err(AutodiffError::ShapeMismatch {
                op: "div_rows",
                left: self.value(mat).shape.clone(),
                right: self.value(denom).shape.clone(),
            });
        }
        let mut out = self.value(mat).data.clone();
        let d = &self.nodes[denom.0].value.data;
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] /= d[i];
            }
        }
        let rg = self.requires_grad(mat) || self.requires_grad(denom);
        Ok(self.push(Op::DivRows(mat, denom), Tensor::matrix(r, c, out), rg))
    }

    /// Select rows of src (k×d) by index; gradient scatter-adds into src.
    pub fn gather_rows(&mut self, src: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (k, d) = self.value(src).dims2().ok_or_else(|| AutodiffError::NotAMatrix {
            op: "gather_rows",
            shape: self.value(src).shape.clone(),
        })?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= k {
                return Err(AutodiffError::IndexOutOfBounds { index: ix, rows: k });
            }
            out.extend_from_slice(&self.value(src).data[ix * d..(ix + 1) * d]);
        }
        let rg = self.requires_grad(src);
        Ok(self.push(
            Op::GatherRows(src, indices.to_vec()),
            Tensor::matrix(indices.len(), d, out),
            rg,
        ))
    }

    /// Contiguous column block [start, start+len) of a rank-2 tensor.
    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(input).dims2().ok_or_else(|| AutodiffError::NotAMatrix {
            op: "slice_cols",
            shape: self.value(input).shape.clone(),
        })?;
        if start + len > c {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                left: self.value(input).shape.clone(),
                right: vec![start, len],
            });
        }
        let src = &self.value(input).data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.requires_grad(input);
        Ok(self.push(Op::SliceCols { input, start, len }, Tensor::matrix(r, len, out), rg))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty(), "concat_cols of zero parts");
        let (r, _) = self.value(parts[0]).dims2().ok_or_else(|| AutodiffError::NotAMatrix {
            op: "concat_cols",
            shape: self.value(parts[0]).shape.clone(),
        })?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2().ok_or_else(|| AutodiffError::NotAMatrix {
                op: "concat_cols",
                shape: self.value(p).shape.clone(),
            })?;
            if pr != r {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape.clone(),
                    right: self.value(p).shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.nodes[p.0].value.data;
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(r, total, out), rg))
    }

    /// Reverse sweep from a scalar output. Returns per-node gradients for
    /// nodes reachable by differentiation; untouched nodes map to None.
    pub fn backward(&self, output: NodeId) -> Result<Vec<Option<Tensor>>> {
        if !self.value(output).is_scalar() {
            return Err(AutodiffError::NonScalarOutput {
                shape: self.value(output).shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: &Tensor) {
        if !self.requires_grad(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            None => *slot = Some(delta.clone()),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                let (ar, ac) = self.value(*a).dims2().unwrap();
                let (_, bc) = self.value(*b).dims2().unwrap();
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(&self.value(*b).data, ac, bc);
                    let da = matmul_raw(&g.data, &bt, ar, bc, ac);
                    let da = Tensor::new(self.value(*a).shape.clone(), da);
                    self.accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let at = transpose_raw(&self.value(*a).data, ar, ac);
                    let db = matmul_raw(&at, &g.data, ac, ar, bc);
                    let db = Tensor::new(self.value(*b).shape.clone(), db);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let da = transpose_raw(&g.data, c, r);
                self.accumulate(grads, *a, &Tensor::new(self.value(*a).shape.clone(), da));
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, g, 1.0);
                self.accumulate_broadcast(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, g, 1.0);
                self.accumulate_broadcast(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let d = self.mul_partial(g, *b);
                    self.accumulate_broadcast_tensor(grads, *a, &d);
                }
                if self.requires_grad(*b) {
                    let d = self.mul_partial(g, *a);
                    self.accumulate_broadcast_tensor(grads, *b, &d);
                }
            }
            Op::AddScalar(a, _) => self.accumulate(grads, *a, g),
            Op::MulScalar(a, c) => {
                let d = Tensor::new(g.shape.clone(), g.data.iter().map(|x| x * c).collect());
                self.accumulate(grads, *a, &d);
            }
            Op::Unary(a, kind) => {
                if !self.requires_grad(*a) {
                    return;
                }
                let x = &self.value(*a).data;
                let y = &node.value.data;
                let d: Vec<f64> = match kind {
                    UnaryKind::LeakyRelu(bits) => {
                        let alpha = f64::from_bits(*bits);
                        x.iter()
                            .zip(&g.data)
                            .map(|(&xi, &gi)| if xi >= 0.0 { gi } else { alpha * gi })
                            .collect()
                    }
                    UnaryKind::Exp => y.iter().zip(&g.data).map(|(&yi, &gi)| yi * gi).collect(),
                    UnaryKind::Log => x.iter().zip(&g.data).map(|(&xi, &gi)| gi / xi).collect(),
                    UnaryKind::Square => {
                        x.iter().zip(&g.data).map(|(&xi, &gi)| 2.0 * xi * gi).collect()
                    }
                    UnaryKind::Sqrt => {
                        y.iter().zip(&g.data).map(|(&yi, &gi)| gi / (2.0 * yi)).collect()
                    }
                    UnaryKind::Tanh => {
                        y.iter().zip(&g.data).map(|(&yi, &gi)| gi * (1.0 - yi * yi)).collect()
                    }
                    UnaryKind::Softplus => x
                        .iter()
                        .zip(&g.data)
                        .map(|(&xi, &gi)| gi * sigmoid(xi))
                        .collect(),
                };
                self.accumulate(grads, *a, &Tensor::new(self.value(*a).shape.clone(), d));
            }
            Op::StraightThrough { pre, quantized: _ } => {
                self.accumulate(grads, *pre, g);
            }
            Op::Sum(a) => {
                let v = self.value(*a);
                let d = Tensor::new(v.shape.clone(), vec![g.data[0]; v.len()]);
                self.accumulate(grads, *a, &d);
            }
            Op::Mean(a) => {
                let v = self.value(*a);
                let s = g.data[0] / v.len() as f64;
                let d = Tensor::new(v.shape.clone(), vec![s; v.len()]);
                self.accumulate(grads, *a, &d);
            }
            Op::L2NormSq(a) => {
                let v = self.value(*a);
                let d = Tensor::new(
                    v.shape.clone(),
                    v.data.iter().map(|x| 2.0 * x * g.data[0]).collect(),
                );
                self.accumulate(grads, *a, &d);
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = if *axis == 0 { g.data[j] } else { g.data[i] };
                    }
                }
                self.accumulate(grads, *a, &Tensor::new(self.value(*a).shape.clone(), d));
            }
            Op::AddRow(mat, row) => {
                self.accumulate(grads, *mat, g);
                if self.requires_grad(*row) {
                    let (r, c) = self.value(*mat).dims2().unwrap();
                    let mut d = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g.data[i * c + j];
                        }
                    }
                    self.accumulate(grads, *row, &Tensor::vector(d));
                }
            }
            Op::DivRows(mat, denom) => {
                let (r, c) = self.value(*mat).dims2().unwrap();
                let dv = &self.value(*denom).data;
                if self.requires_grad(*mat) {
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g.data[i * c + j] / dv[i];
                        }
                    }
                    self.accumulate(grads, *mat, &Tensor::new(self.value(*mat).shape.clone(), d));
                }
                if self.requires_grad(*denom) {
                    let m = &self.value(*mat).data;
                    let mut d = vec![0.0; r];
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g.data[i * c + j] * m[i * c + j];
                        }
                        d[i] = -acc / (dv[i] * dv[i]);
                    }
                    self.accumulate(grads, *denom, &Tensor::vector(d));
                }
            }
            Op::GatherRows(src, indices) => {
                if !self.requires_grad(*src) {
                    return;
                }
                let (k, d) = self.value(*src).dims2().unwrap();
                let mut acc = vec![0.0; k * d];
                for (i, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        acc[ix * d + j] += g.data[i * d + j];
                    }
                }
                self.accumulate(grads, *src, &Tensor::new(self.value(*src).shape.clone(), acc));
            }
            Op::SliceCols { input, start, len } => {
                if !self.requires_grad(*input) {
                    return;
                }
                let (r, c) = self.value(*input).dims2().unwrap();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..*len {
                        d[i * c + start + j] = g.data[i * len + j];
                    }
                }
                self.accumulate(grads, *input, &Tensor::new(self.value(*input).shape.clone(), d));
            }
            Op::ConcatCols(parts) => {
                let r = self.value(parts[0]).dims2().unwrap().0;
                let total: usize = parts.iter().map(|&p| self.value(p).dims2().unwrap().1).sum();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(
                            grads,
                            p,
                            &Tensor::new(self.value(p).shape.clone(), d),
                        );
                    }
                    offset += w;
                }
            }
        }
    }

    /// Elementwise product of g with an operand value, respecting scalar broadcast.
    fn mul_partial(&self, g: &Tensor, other: NodeId) -> Tensor {
        let o = self.value(other);
        let d = g
            .data
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi * o.data[if o.data.len() == 1 { 0 } else { i }])
            .collect();
        Tensor::new(g.shape.clone(), d)
    }

    /// Accumulate g into a possibly-scalar operand of a broadcast binary op.
    fn accumulate_broadcast(&self, grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor, sign: f64) {
        if !self.requires_grad(id) {
            return;
        }
        let t = self.value(id);
        if t.len() == g.len() {
            let d = Tensor::new(t.shape.clone(), g.data.iter().map(|x| sign * x).collect());
            self.accumulate(grads, id, &d);
        } else {
            let s: f64 = g.data.iter().sum();
            self.accumulate(grads, id, &Tensor::scalar(sign * s));
        }
    }

    fn accumulate_broadcast_tensor(&self, grads: &mut [Option<Tensor>], id: NodeId, d: &Tensor) {
        let t = self.value(id);
        if t.len() == d.len() {
            self.accumulate(grads, id, d);
        } else {
            self.accumulate(grads, id, &Tensor::scalar(d.data.iter().sum()));
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::matrix(2, 2, vec![2.0, 3.0, 4.0, 5.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_dot() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data, vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a0: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        grad_check(
            &a0,
            |g, x| {
                let a = g.leaf(Tensor::matrix(3, 3, x.to_vec()), true);
                let bb = g.constant(Tensor::matrix(3, 3, b.clone()));
                let m = g.matmul(a, bb).unwrap();
                (a, g.sum(m))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data, vec![-0.2, 2.0]);
    }

    #[test]
    fn exp_zero_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.exp(x);
        let s = g.sum(y);
        assert_eq!(g.value(y).data, vec![1.0]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[0].as_ref().unwrap().data, vec![1.0]);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, -2.0]));
        let err = g.log(x).unwrap_err();
        match err {
            AutodiffError::Domain { op, index, value } => {
                assert_eq!(op, "log");
                assert_eq!(index, 1);
                assert_eq!(value, -2.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn elementwise_kinds_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let n = 4;
            let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..2.0)).collect();
            let y0: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let kind = trial % 8;
            grad_check(
                &x0,
                |g, x| {
                    let a = g.leaf(Tensor::vector(x.to_vec()), true);
                    let b = g.constant(Tensor::vector(y0.clone()));
                    let out = match kind {
                        0 => g.add(a, b).unwrap(),
                        1 => g.sub(a, b).unwrap(),
                        2 => g.mul(a, b).unwrap(),
                        3 => g.leaky_relu(a, 0.2),
                        4 => g.exp(a),
                        5 => g.log(a).unwrap(),
                        6 => g.square(a),
                        _ => g.sqrt(a).unwrap(),
                    };
                    (a, g.sum(out))
                },
                1e-5,
                1e-6,
            );
        }
    }

    #[test]
    fn stop_gradient_forward_identity_and_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.5, -2.5]), true);
        let y = g.stop_gradient(x);
        assert_eq!(g.value(y).data, g.value(x).data);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads[x.index()].is_none() || grads[x.index()].as_ref().unwrap().data == vec![0.0, 0.0]);
    }

    // mixing a live and a detached branch: d(sum(x * sg(x)))/dx = sg(x)
    #[test]
    fn stop_gradient_single_factor_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![2.0, 3.0]), true);
        let sx = g.stop_gradient(x);
        let prod = g.mul(x, sx).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[x.index()].as_ref().unwrap().data, vec![2.0, 3.0]);
    }

    #[test]
    fn straight_through_forward_and_passthrough() {
        let mut g = Graph::new();
        let pre = g.leaf(Tensor::vector(vec![1.1, 1.9]), true);
        let q = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let out = g.straight_through(pre, q).unwrap();
        assert_eq!(g.value(out).data, vec![1.0, 2.0]);
        let s = g.sum(out);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[pre.index()].as_ref().unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn reduction_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = g.mean(x);
        assert_eq!(g.value(m).item(), 2.0);
        let y = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = g.l2_norm_sq(y);
        assert_eq!(g.value(n).item(), 25.0);
    }

    #[test]
    fn reduction_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for kind in 0..4 {
            let x0: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            grad_check(
                &x0,
                |g, x| {
                    let a = g.leaf(Tensor::matrix(2, 3, x.to_vec()), true);
                    let out = match kind {
                        0 => g.sum(a),
                        1 => g.mean(a),
                        2 => g.l2_norm_sq(a),
                        _ => {
                            let s = g.sum_axis(a, 0).unwrap();
                            g.l2_norm_sq(s)
                        }
                    };
                    (a, out)
                },
                1e-5,
                1e-6,
            );
        }
    }

    #[test]
    fn invalid_axis_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        assert!(matches!(
            g.sum_axis(a, 2),
            Err(AutodiffError::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn straight_through_trains_through_a_quantizer() {
        // scalar quantized to {0,1}; true gradient of the quantizer is zero
        // almost everywhere but the estimator still moves the pre-value.
        let mut x = 0.2_f64;
        let target = 1.0;
        let mut losses = Vec::new();
        for _ in 0..100 {
            let mut g = Graph::new();
            let pre = g.leaf(Tensor::scalar(x), true);
            let hard = if x < 0.5 { 0.0 } else { 1.0 };
            let q = g.constant(Tensor::scalar(hard));
            let st = g.straight_through(pre, q).unwrap();
            let t = g.constant(Tensor::scalar(target));
            let diff = g.sub(st, t).unwrap();
            let loss = g.l2_norm_sq(diff);
            losses.push(g.value(loss).item());
            let grads = g.backward(loss).unwrap();
            let dx = grads[pre.index()].as_ref().unwrap().data[0];
            x -= 0.01 * dx;
        }
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {:?}", w);
        }
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn backward_gradients_independent_of_construction_order() {
        // same DAG, two legal construction orders for independent branches
        let build = |swap: bool| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(vec![0.3, -0.7, 1.2]), true);
            let (a, b);
            if swap {
                b = g.square(x);
                a = g.exp(x);
            } else {
                a = g.exp(x);
                b = g.square(x);
            }
            let s = g.add(a, b).unwrap();
            let out = g.sum(s);
            let grads = g.backward(out).unwrap();
            grads[x.index()].clone().unwrap().data
        };
        assert_eq!(build(false), build(true));
    }
}
