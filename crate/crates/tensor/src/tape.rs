//! Reverse-mode differentiation over a linear tape of matrix primitives.
//!
//! Every value on the tape is a `rows × cols` matrix; rank-1 parameters are
//! viewed as row vectors. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::params::{ParamId, Params};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Stack vertically; inputs share a column count.
    Rows,
    /// Stack horizontally; inputs share a row count.
    Cols,
}

/// The primitive set dispatched by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    Concat(Axis),
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    SumSet,
    Embedding(Vec<usize>),
    Dropout(f64),
    ScalarAffine { scale: f64, shift: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "elementwise-mul",
            Primitive::Concat(_) => "concat",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::SumSet => "sum-over-set",
            Primitive::Embedding(_) => "embedding-lookup",
            Primitive::Dropout(_) => "dropout-mask",
            Primitive::ScalarAffine { .. } => "scalar-affine",
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>, Axis),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    SumSet(Vec<Var>),
    SumAll(Var),
    Gather(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    Affine(Var, f64),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    BceLogits(Var, Vec<f64>),
    Pick(Var, Vec<(usize, usize)>),
}

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// One forward computation. Reads parameters from a shared [`Params`]
/// snapshot; gradients are returned by [`Tape::backward`] and applied to the
/// store by the caller.
pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p> Tape<'p> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new(params: &'p Params) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(params: &'p Params, seed: u64) -> Self {
        let mut tape = Self::new(params);
        tape.training = true;
        tape.rng = ChaCha8Rng::seed_from_u64(seed);
        tape
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(buf) => buf,
            Value::Param(id) => self.params.get(*id).values(),
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        let (r, c) = self.dims(v);
        vec![r, c]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shapes are valid")
    }

    pub fn row_values(&self, v: Var, row: usize) -> &[f64] {
        let (_, c) = self.dims(v);
        &self.value(v)[row * c..(row + 1) * c]
    }

    /// A value that does not receive gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.into_values(), Op::Input, false))
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        self.constant(Tensor::matrix(rows, cols, values)?)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Input, false)
    }

    /// A free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.into_values(), Op::Leaf, true))
    }

    /// The tape node for a parameter group. Repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.params.get(id);
        let (rows, cols) = t.dims2().expect("parameters are rank 1 or 2");
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: t.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Dispatches one primitive by name.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let unary = |inputs: &[Var]| -> Result<Var> {
            match inputs {
                [x] => Ok(*x),
                _ => Err(arity(prim.name(), 1, inputs.len())),
            }
        };
        let binary = |inputs: &[Var]| -> Result<(Var, Var)> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(arity(prim.name(), 2, inputs.len())),
            }
        };
        match prim {
            Primitive::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            Primitive::Add => {
                let (a, b) = binary(inputs)?;
                self.add(a, b)
            }
            Primitive::Mul => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            Primitive::Concat(axis) => self.concat(inputs, *axis),
            Primitive::Sigmoid => {
                let x = unary(inputs)?;
                Ok(self.sigmoid(x))
            }
            Primitive::Tanh => {
                let x = unary(inputs)?;
                Ok(self.tanh(x))
            }
            Primitive::Relu => {
                let x = unary(inputs)?;
                Ok(self.relu(x))
            }
            Primitive::Softmax => {
                let x = unary(inputs)?;
                Ok(self.softmax(x))
            }
            Primitive::SumSet => self.sum_set(inputs),
            Primitive::Embedding(ids) => {
                let table = unary(inputs)?;
                self.embedding(table, ids)
            }
            Primitive::Dropout(rate) => {
                let x = unary(inputs)?;
                self.dropout(x, *rate)
            }
            Primitive::ScalarAffine { scale, shift } => {
                let x = unary(inputs)?;
                Ok(self.affine(x, *scale, *shift))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// Elementwise sum. `b` may also be a row vector, a column vector or a
    /// scalar broadcast across `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(b);
        let mode = if (br, bc) == (r, c) {
            Broadcast::Same
        } else if (br, bc) == (1, 1) {
            Broadcast::Scalar
        } else if br == 1 && bc == c {
            Broadcast::Row
        } else if bc == 1 && br == r {
            Broadcast::Col
        } else {
            return Err(shape_err("add", &[r, c], &[br, bc]));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = av.to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += match mode {
                    Broadcast::Same => bv[i * c + j],
                    Broadcast::Row => bv[j],
                    Broadcast::Col => bv[i],
                    Broadcast::Scalar => bv[0],
                };
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Add(a, b, mode), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise-mul", a, b)?;
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let (r0, c0) = self.dims(first);
        let out = match axis {
            Axis::Rows => {
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if c != c0 {
                        return Err(shape_err("concat", &[r0, c0], &[r, c]));
                    }
                    rows += r;
                }
                let mut out = Vec::with_capacity(rows * c0);
                for &p in parts {
                    out.extend_from_slice(self.value(p));
                }
                (rows, c0, out)
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if r != r0 {
                        return Err(shape_err("concat", &[r0, c0], &[r, c]));
                    }
                    cols += c;
                }
                let mut out = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        let (_, c) = self.dims(p);
                        out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                    }
                }
                (r0, cols, out)
            }
        };
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out.0, out.1, out.2, Op::Concat(parts.to_vec(), axis), ng))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.needs(x);
        self.push(r, c, out, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map_unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.needs(x);
        self.push(r, c, out, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.needs(x);
        self.push(r, c, out, Op::LogSoftmax(x), ng)
    }

    /// Sum of equally shaped tensors, accumulated in input order.
    pub fn sum_set(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op: "sum-over-set",
            msg: "empty set has no shape; use zeros".into(),
        })?;
        let (r, c) = self.dims(first);
        let mut out = vec![0.0; r * c];
        for &p in parts {
            if self.dims(p) != (r, c) {
                return Err(shape_err("sum-over-set", &[r, c], &self.shape(p)));
            }
            for (o, v) in out.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(r, c, out, Op::SumSet(parts.to_vec()), ng))
    }

    /// Sum of all entries as a 1×1 value.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(1, 1, vec![s], Op::SumAll(x), ng)
    }

    /// Gathers rows of `table`; the gradient scatters back to the same rows.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(table);
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding-lookup",
                msg: "no indices".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "embedding-lookup",
                msg: format!("index {bad} out of range for table {rows}×{cols}"),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(table);
        Ok(self.push(ids.len(), cols, out, Op::Gather(table, ids.to_vec()), ng))
    }

    /// Inverted dropout. Identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout-mask",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.dims(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.needs(x);
        Ok(self.push(r, c, out, Op::Dropout(x, mask), ng))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r * c != rows * cols {
            return Err(shape_err("reshape", &[r, c], &[rows, cols]));
        }
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(rows, cols, out, Op::Reshape(x), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid {
                op: "slice-cols",
                msg: format!("columns {start}..{} out of range for {r}×{c}", start + len),
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(r, len, out, Op::SliceCols(x, start), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(TensorError::Invalid {
                op: "slice-rows",
                msg: format!("rows {start}..{} out of range for {r}×{c}", start + len),
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        Ok(self.push(len, c, out, Op::SliceRows(x, start), ng))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, 1)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.needs(x);
        self.push(c, r, out, Op::Transpose(x), ng)
    }

    /// Summed negative log-likelihood of `targets[i]` under a softmax of row `i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(shape_err("cross-entropy", &[r, c], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Invalid {
                op: "cross-entropy",
                msg: format!("target {bad} out of range for {c} classes"),
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let ng = self.needs(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            ng,
        ))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r * c {
            return Err(shape_err("bce-with-logits", &[r, c], &[targets.len()]));
        }
        let loss = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&s, &y)| softplus(s) - y * s)
            .sum();
        let ng = self.needs(logits);
        Ok(self.push(1, 1, vec![loss], Op::BceLogits(logits, targets.to_vec()), ng))
    }

    /// Picks entries `(row, col)` into an `m × 1` column.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if at.is_empty() {
            return Err(TensorError::Invalid {
                op: "pick",
                msg: "no positions".into(),
            });
        }
        if let Some(&(i, j)) = at.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(TensorError::Invalid {
                op: "pick",
                msg: format!("position ({i}, {j}) out of range for {r}×{c}"),
            });
        }
        let v = self.value(x);
        let out = at.iter().map(|&(i, j)| v[i * c + j]).collect();
        let ng = self.needs(x);
        Ok(self.push(at.len(), 1, out, Op::Pick(x, at.to_vec()), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(shape_err(op, &self.shape(a), &self.shape(b)));
        }
        Ok(())
    }

    /// Propagates d(loss)/d(node) back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(TensorError::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, Var(idx), g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        this: Var,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Input => {}
            Op::Leaf => {
                out.leaves.insert(this, g);
            }
            Op::Param(id) => {
                out.add_param(*id, g);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.needs(*a) {
                    let ga = self.grad_buf(grads, *a);
                    gemm(m, n, k, &g, false, self.value(*b), true, ga);
                }
                if self.needs(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gemm(k, m, n, self.value(*a), true, &g, false, gb);
                }
            }
            Op::Add(a, b, mode) => {
                if self.needs(*a) {
                    add_into(self.grad_buf(grads, *a), &g);
                }
                if self.needs(*b) {
                    let gb = self.grad_buf(grads, *b);
                    for i in 0..rows {
                        for j in 0..cols {
                            let v = g[i * cols + j];
                            match mode {
                                Broadcast::Same => gb[i * cols + j] += v,
                                Broadcast::Row => gb[j] += v,
                                Broadcast::Col => gb[i] += v,
                                Broadcast::Scalar => gb[0] += v,
                            }
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(self.grad_buf(grads, *a), &g);
                }
                if self.needs(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gb.iter_mut().zip(&g).for_each(|(o, v)| *o -= v);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let ga = self.grad_buf(grads, *a);
                    for ((o, gv), bv) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += gv * bv;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let gb = self.grad_buf(grads, *b);
                    for ((o, gv), av) in gb.iter_mut().zip(&g).zip(av) {
                        *o += gv * av;
                    }
                }
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = self.dims(p);
                        let len = pr * pc;
                        if self.needs(p) {
                            add_into(self.grad_buf(grads, p), &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Axis::Cols => {
                    let mut col0 = 0;
                    for &p in parts {
                        let (_, pc) = self.dims(p);
                        if self.needs(p) {
                            let gp = self.grad_buf(grads, p);
                            for i in 0..rows {
                                add_into(
                                    &mut gp[i * pc..(i + 1) * pc],
                                    &g[i * cols + col0..i * cols + col0 + pc],
                                );
                            }
                        }
                        col0 += pc;
                    }
                }
            },
            Op::Sigmoid(x) => {
                let y = self.value(this);
                let gx = self.grad_buf(grads, *x);
                for ((o, gv), y) in gx.iter_mut().zip(&g).zip(y) {
                    *o += gv * y * (1.0 - y);
                }
            }
            Op::Tanh(x) => {
                let y = self.value(this);
                let gx = self.grad_buf(grads, *x);
                for ((o, gv), y) in gx.iter_mut().zip(&g).zip(y) {
                    *o += gv * (1.0 - y * y);
                }
            }
            Op::Relu(x) => {
                let y = self.value(this);
                let gx = self.grad_buf(grads, *x);
                for ((o, gv), y) in gx.iter_mut().zip(&g).zip(y) {
                    if *y > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.value(this);
                let gx = self.grad_buf(grads, *x);
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        gx[i * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = self.value(this);
                let gx = self.grad_buf(grads, *x);
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        gx[i * cols + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::SumSet(parts) => {
                for &p in parts {
                    if self.needs(p) {
                        add_into(self.grad_buf(grads, p), &g);
                    }
                }
            }
            Op::SumAll(x) => {
                let gx = self.grad_buf(grads, *x);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Gather(table, ids) => {
                let (_, tc) = self.dims(*table);
                let gt = self.grad_buf(grads, *table);
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut gt[i * tc..(i + 1) * tc], &g[r * tc..(r + 1) * tc]);
                }
            }
            Op::Dropout(x, mask) => {
                let gx = self.grad_buf(grads, *x);
                for ((o, gv), m) in gx.iter_mut().zip(&g).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::Affine(x, scale) => {
                let gx = self.grad_buf(grads, *x);
                gx.iter_mut().zip(&g).for_each(|(o, v)| *o += scale * v);
            }
            Op::Reshape(x) => add_into(self.grad_buf(grads, *x), &g),
            Op::SliceCols(x, start) => {
                let (_, xc) = self.dims(*x);
                let gx = self.grad_buf(grads, *x);
                for i in 0..rows {
                    add_into(
                        &mut gx[i * xc + start..i * xc + start + cols],
                        &g[i * cols..(i + 1) * cols],
                    );
                }
            }
            Op::SliceRows(x, start) => {
                let gx = self.grad_buf(grads, *x);
                add_into(&mut gx[start * cols..(start + rows) * cols], &g);
            }
            Op::Transpose(x) => {
                let gx = self.grad_buf(grads, *x);
                // this node is rows×cols, x is cols×rows
                for i in 0..rows {
                    for j in 0..cols {
                        gx[j * rows + i] += g[i * cols + j];
                    }
                }
            }
            Op::CrossEntropy(x, targets, probs) => {
                let (_, xc) = self.dims(*x);
                let gx = self.grad_buf(grads, *x);
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..xc {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gx[i * xc + j] += g[0] * (probs[i * xc + j] - onehot);
                    }
                }
            }
            Op::BceLogits(x, targets) => {
                let xv = self.value(*x);
                let gx = self.grad_buf(grads, *x);
                for ((o, &s), &y) in gx.iter_mut().zip(xv).zip(targets) {
                    *o += g[0] * (sigmoid(s) - y);
                }
            }
            Op::Pick(x, at) => {
                let (_, xc) = self.dims(*x);
                let gx = self.grad_buf(grads, *x);
                for (r, &(i, j)) in at.iter().enumerate() {
                    gx[i * xc + j] += g[r];
                }
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let (r, c) = self.dims(v);
        grads[v.0].get_or_insert_with(|| vec![0.0; r * c])
    }
}

fn arity(op: &'static str, want: usize, got: usize) -> TensorError {
    TensorError::Invalid {
        op,
        msg: format!("expected {want} input(s), got {got}"),
    }
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    fn add_param(&mut self, id: ParamId, g: Vec<f64>) {
        match self.params.iter_mut().find(|(p, _)| *p == id) {
            Some((_, buf)) => add_into(buf, &g),
            None => self.params.push((id, g)),
        }
    }

    /// Gradient of a parameter group, or `None` when the loss does not reach it.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Gradient of a [`Tape::leaf`] variable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v).map(Vec::as_slice)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c += op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
/// A transposed operand is stored in its untransposed layout.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if m * k * n <= 4096 {
        for i in 0..m {
            for p in 0..k {
                let av = a[(i as isize * rsa + p as isize * csa) as usize];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    c[i * n + j] += av * b[(p as isize * rsb + j as isize * csb) as usize];
                }
            }
        }
        return;
    }
    // SAFETY: slices cover m·k, k·n and m·n elements under the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
