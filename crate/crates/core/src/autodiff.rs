//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly and records its
//! inputs, so building the graph *is* the forward pass. [`Graph::backward`]
//! walks the tape in reverse and returns exact gradients for every node that
//! depends on a parameter or a variable input.
//!
//! Matrices are 2-D tensors `[rows, cols]`. Statement-level operations work on
//! "segmented" matrices: the rows of several variable-length sequences stacked
//! on top of each other, with a list of per-segment lengths.

use std::rc::Rc;

use rand::Rng;

use crate::error::{LeoError, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Variable,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Log(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    OffDiagLogSoftmax(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        segments: Rc<Vec<usize>>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Gather {
        table: NodeId,
        ids: Rc<Vec<usize>>,
    },
    ScatterRows {
        x: NodeId,
        positions: Rc<Vec<usize>>,
    },
    Reshape(NodeId),
    RowScale(NodeId, NodeId),
    RowNormalize {
        x: NodeId,
        norms: Vec<f64>,
    },
    PickPerRow {
        x: NodeId,
        idx: Rc<Vec<usize>>,
    },
    WeightedSum {
        x: NodeId,
        weights: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::OffDiagLogSoftmax(_) => "off_diag_log_softmax",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool { .. } => "max_pool",
            Op::Dropout { .. } => "dropout",
            Op::ConcatCols(_) => "concat",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather { .. } => "gather",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Reshape(_) => "reshape",
            Op::RowScale(..) => "row_scale",
            Op::RowNormalize { .. } => "row_normalize",
            Op::PickPerRow { .. } => "pick",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`; `None` when the node does
    /// not influence the loss through any differentiable path.
    pub fn of(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }

    /// Adds the parameter gradients into the store's accumulators.
    /// Parameters not reached by the loss receive nothing (zero gradient).
    pub fn accumulate(&self, store: &mut ParameterStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let acc = store.get_mut(pid).grad.data_mut();
                for (a, v) in acc.iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(LeoError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(id))
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is tracked (used for checking input gradients).
    pub fn variable(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Variable, true)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<NodeId> {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn param_by_name(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        let id = store.id(name)?;
        self.param(store, id)
    }

    fn check_matrix(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let t = self.value(id);
        if t.shape().len() != 2 {
            return Err(LeoError::config(format!(
                "{what}: expected a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok(dims2(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.check_matrix(a, "matmul lhs")?;
        let (k2, m) = self.check_matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(LeoError::config(format!("matmul: {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.check_matrix(a, "matmul_nt lhs")?;
        let (m, k2) = self.check_matrix(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(LeoError::config(format!("matmul_nt: {n}x{k} by ({m}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; n * m];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNT(a, b), ng)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.check_matrix(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(a), ng)
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = self.check_matrix(x, "add_bias")?;
        if self.value(b).len() != m {
            return Err(LeoError::config(format!(
                "add_bias: {} bias entries for {m} columns",
                self.value(b).len()
            )));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for i in 0..n {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), ng)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(LeoError::config(format!(
                "{what}: shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b, op.name())?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, factor), ng)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(v, op, ng)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.check_matrix(a, "softmax")?;
        let src = self.value(a);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            softmax_row(src.row(i), out.row_mut(i));
        }
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.check_matrix(a, "log_softmax")?;
        let src = self.value(a);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            let row = src.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// For a square matrix `s`, entry `(i, j)` becomes
    /// `s[i][j] - log Σ_{a≠i} exp(s[i][a])` for `j ≠ i`; the diagonal is zero and
    /// carries no gradient. Rows with no off-diagonal entries are all zero.
    pub fn off_diag_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.check_matrix(a, "off_diag_log_softmax")?;
        if n != m {
            return Err(LeoError::config("off_diag_log_softmax needs a square matrix"));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros(&[n, n]);
        if n > 1 {
            for i in 0..n {
                let row = src.row(i);
                let max = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &v)| (v - max).exp())
                    .sum();
                let lse = max + sum.ln();
                let orow = out.row_mut(i);
                for j in 0..n {
                    if j != i {
                        orow[j] = row[j] - lse;
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::OffDiagLogSoftmax(a), ng)
    }

    /// Valid 1-D convolution applied independently to each segment of `x`.
    ///
    /// `x` is `[Σ len, c_in]`; `w` is `[kernel, c_in, filters]` and `b` is
    /// `[filters]`. Each segment must be at least `kernel` rows long and yields
    /// `len - kernel + 1` output rows.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, segments: Rc<Vec<usize>>) -> Result<NodeId> {
        let (rows, c_in) = self.check_matrix(x, "conv1d input")?;
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 3 || wshape[1] != c_in {
            return Err(LeoError::config(format!(
                "conv1d: kernel shape {wshape:?} for {c_in} input channels"
            )));
        }
        let (kernel, filters) = (wshape[0], wshape[2]);
        if self.value(b).len() != filters {
            return Err(LeoError::config("conv1d: bias length differs from filter count"));
        }
        if segments.iter().sum::<usize>() != rows {
            return Err(LeoError::config("conv1d: segment lengths do not cover the input"));
        }
        if let Some(&short) = segments.iter().find(|&&l| l < kernel) {
            return Err(LeoError::config(format!(
                "conv1d: segment of length {short} is shorter than kernel {kernel}"
            )));
        }
        let out_rows: usize = segments.iter().map(|l| l - kernel + 1).sum();
        let mut out = vec![0.0; out_rows * filters];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let window = kernel * c_in;
        let (mut start, mut o) = (0usize, 0usize);
        for &len in segments.iter() {
            for t in 0..=(len - kernel) {
                let orow = &mut out[o * filters..(o + 1) * filters];
                orow.copy_from_slice(bs);
                let win = &xs[(start + t) * c_in..(start + t) * c_in + window];
                gemm_acc(win, ws, orow, 1, window, filters);
                o += 1;
            }
            start += len;
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::new(vec![out_rows, filters], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                segments,
            },
            ng,
        )
    }

    /// Max over time within each segment: `[Σ len, c] -> [segments, c]`.
    /// Ties resolve to the earliest row.
    pub fn max_pool(&mut self, x: NodeId, segments: &[usize]) -> Result<NodeId> {
        let (rows, c) = self.check_matrix(x, "max_pool")?;
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(LeoError::config("max_pool: invalid segment lengths"));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros(&[segments.len(), c]);
        let mut argmax = vec![0usize; segments.len() * c];
        let mut start = 0;
        for (s, &len) in segments.iter().enumerate() {
            for j in 0..c {
                let mut best = start;
                for r in start + 1..start + len {
                    if src.data()[r * c + j] > src.data()[best * c + j] {
                        best = r;
                    }
                }
                argmax[s * c + j] = best;
                out.data_mut()[s * c + j] = src.data()[best * c + j];
            }
            start += len;
        }
        let ng = self.needs(x);
        self.push(out, Op::MaxPool { x, argmax }, ng)
    }

    /// Inverted dropout: in train mode each element is kept with probability
    /// `retain` and scaled by `1/retain`; in eval mode this is the identity and
    /// returns `x` itself.
    pub fn dropout(&mut self, x: NodeId, retain: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if !(retain > 0.0 && retain <= 1.0) {
            return Err(LeoError::config(format!("dropout retain probability {retain}")));
        }
        if self.mode == Mode::Eval || retain == 1.0 {
            return Ok(x);
        }
        let scale = 1.0 / retain;
        let src = self.value(x);
        let mask: Vec<f64> = (0..src.len())
            .map(|_| if rng.random::<f64>() < retain { scale } else { 0.0 })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let ng = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| LeoError::config("concat of nothing"))?;
        let (n, _) = self.check_matrix(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.check_matrix(p, "concat")?;
            if r != n {
                return Err(LeoError::config("concat: row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[n, total]);
        for i in 0..n {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out.row_mut(i)[off..off + w].copy_from_slice(self.value(p).row(i));
                off += w;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Mean over rows: `[n, m] -> [1, m]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.check_matrix(x, "mean_rows")?;
        if n == 0 {
            return Err(LeoError::config("mean_rows of an empty matrix"));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros(&[1, m]);
        for i in 0..n {
            for (o, v) in out.data_mut().iter_mut().zip(src.row(i)) {
                *o += v / n as f64;
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(LeoError::config("mean of an empty tensor"));
        }
        let s = t.sum() / t.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Row lookup: `[vocab, d]` gathered by `ids` into `[ids.len(), d]`.
    pub fn gather(&mut self, table: NodeId, ids: Rc<Vec<usize>>) -> Result<NodeId> {
        let (v, d) = self.check_matrix(table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(LeoError::usage(format!("token id {bad} outside vocabulary of {v}")));
        }
        let src = self.value(table);
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(id));
        }
        let ng = self.needs(table);
        self.push(out, Op::Gather { table, ids }, ng)
    }

    /// Places row `s` of `x` at row `positions[s]` of a `[total, d]` zero matrix.
    pub fn scatter_rows(&mut self, x: NodeId, positions: Rc<Vec<usize>>, total: usize) -> Result<NodeId> {
        let (n, d) = self.check_matrix(x, "scatter_rows")?;
        if positions.len() != n || positions.iter().any(|&p| p >= total) {
            return Err(LeoError::config("scatter_rows: bad positions"));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros(&[total, d]);
        for (s, &p) in positions.iter().enumerate() {
            out.row_mut(p).copy_from_slice(src.row(s));
        }
        let ng = self.needs(x);
        self.push(out, Op::ScatterRows { x, positions }, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Multiplies row `i` of `x` by the scalar `s[i]`.
    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (n, _) = self.check_matrix(x, "row_scale")?;
        if self.value(s).len() != n {
            return Err(LeoError::usage(format!(
                "row_scale: {} gates for {n} rows",
                self.value(s).len()
            )));
        }
        let mut out = self.value(x).clone();
        let gates = self.value(s).data().to_vec();
        for (i, g) in gates.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= g);
        }
        let ng = self.needs(x) || self.needs(s);
        self.push(out, Op::RowScale(x, s), ng)
    }

    /// Scales each row to unit L2 norm; rows with norm below `1e-12` become zero.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, _) = self.check_matrix(x, "row_normalize")?;
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = out.row_mut(i);
            let norm = dot(row, row).sqrt();
            norms.push(norm);
            let inv = if norm < NORM_FLOOR { 0.0 } else { 1.0 / norm };
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let ng = self.needs(x);
        self.push(out, Op::RowNormalize { x, norms }, ng)
    }

    /// `out[i] = x[i][idx[i]]`
    pub fn pick(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId> {
        let (n, m) = self.check_matrix(x, "pick")?;
        if idx.len() != n || idx.iter().any(|&j| j >= m) {
            return Err(LeoError::usage("pick: index out of range"));
        }
        let src = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| src.row(i)[j]).collect();
        let ng = self.needs(x);
        self.push(Tensor::vector(data), Op::PickPerRow { x, idx }, ng)
    }

    /// `Σ weights ⊙ x` with constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        if weights.shape() != self.value(x).shape() {
            return Err(LeoError::config("weighted_sum: weight shape differs"));
        }
        let s = dot(weights.data(), self.value(x).data());
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(LeoError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                params.push((pid, idx));
            }
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !upstream.is_finite() {
                return Err(LeoError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            self.backward_node(idx, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, idx: usize, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        // Accumulate a contribution into the gradient slot of `target`.
        let mut acc = |target: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target.0].needs_grad {
                return;
            }
            let slot = grads[target.0].get_or_insert_with(|| Tensor::zeros(self.nodes[target.0].value.shape()));
            f(slot.data_mut());
        };
        let u = up.data();
        match &node.op {
            Op::Input | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.value(*a));
                let m = out.cols();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| gemm_nt_acc(u, vb, g, n, m, k));
                acc(*b, &mut |g| gemm_tn_acc(va, u, g, n, k, m));
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = dims2(self.value(*a));
                let m = out.cols();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // out = a bᵀ: da = up · b, db = upᵀ · a
                acc(*a, &mut |g| gemm_acc(u, vb, g, n, m, k));
                acc(*b, &mut |g| gemm_tn_acc(u, va, g, n, m, k));
            }
            Op::Transpose(a) => {
                let (n, m) = dims2(self.value(*a));
                acc(*a, &mut |g| {
                    for i in 0..n {
                        for j in 0..m {
                            g[i * m + j] += u[j * n + i];
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let m = out.cols();
                acc(*x, &mut |g| g.iter_mut().zip(u).for_each(|(g, u)| *g += u));
                acc(*b, &mut |g| {
                    for row in u.chunks(m) {
                        g.iter_mut().zip(row).for_each(|(g, u)| *g += u);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(u).for_each(|(g, u)| *g += u));
                acc(*b, &mut |g| g.iter_mut().zip(u).for_each(|(g, u)| *g += u));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(u).for_each(|(g, u)| *g += u));
                acc(*b, &mut |g| g.iter_mut().zip(u).for_each(|(g, u)| *g -= u));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += u[i] * vb[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += u[i] * va[i];
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |g| g.iter_mut().zip(u).for_each(|(g, u)| *g += u * f)),
            Op::Log(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += u[i] / va[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += u[i] * y[i];
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            g[i] += u[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += u[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += u[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Softmax(a) => {
                let m = out.cols();
                let y = out.data();
                acc(*a, &mut |g| {
                    for ((gr, yr), ur) in g.chunks_mut(m).zip(y.chunks(m)).zip(u.chunks(m)) {
                        let s = dot(yr, ur);
                        for j in 0..m {
                            gr[j] += yr[j] * (ur[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let m = out.cols();
                let y = out.data();
                acc(*a, &mut |g| {
                    for ((gr, yr), ur) in g.chunks_mut(m).zip(y.chunks(m)).zip(u.chunks(m)) {
                        let s: f64 = ur.iter().sum();
                        for j in 0..m {
                            gr[j] += ur[j] - yr[j].exp() * s;
                        }
                    }
                });
            }
            Op::OffDiagLogSoftmax(a) => {
                let n = out.rows();
                let y = out.data();
                if n > 1 {
                    acc(*a, &mut |g| {
                        for i in 0..n {
                            let s: f64 = (0..n).filter(|&j| j != i).map(|j| u[i * n + j]).sum();
                            for j in 0..n {
                                if j != i {
                                    g[i * n + j] += u[i * n + j] - y[i * n + j].exp() * s;
                                }
                            }
                        }
                    });
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                segments,
            } => {
                let c_in = self.value(*x).cols();
                let filters = out.cols();
                let window = kernel * c_in;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                acc(*b, &mut |g| {
                    for row in u.chunks(filters) {
                        g.iter_mut().zip(row).for_each(|(g, u)| *g += u);
                    }
                });
                acc(*w, &mut |g| {
                    let (mut start, mut o) = (0usize, 0usize);
                    for &len in segments.iter() {
                        for t in 0..=(len - kernel) {
                            let win = &xs[(start + t) * c_in..(start + t) * c_in + window];
                            let urow = &u[o * filters..(o + 1) * filters];
                            gemm_tn_acc(win, urow, g, 1, window, filters);
                            o += 1;
                        }
                        start += len;
                    }
                });
                acc(*x, &mut |g| {
                    let (mut start, mut o) = (0usize, 0usize);
                    for &len in segments.iter() {
                        for t in 0..=(len - kernel) {
                            let urow = &u[o * filters..(o + 1) * filters];
                            let gwin = &mut g[(start + t) * c_in..(start + t) * c_in + window];
                            gemm_nt_acc(urow, ws, gwin, 1, filters, window);
                            o += 1;
                        }
                        start += len;
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                let c = out.cols();
                acc(*x, &mut |g| {
                    for (k, &r) in argmax.iter().enumerate() {
                        g[r * c + k % c] += u[k];
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |g| {
                for i in 0..g.len() {
                    g[i] += u[i] * mask[i];
                }
            }),
            Op::ConcatCols(parts) => {
                let n = out.rows();
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |g| {
                        for i in 0..n {
                            for j in 0..w {
                                g[i * w + j] += u[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::MeanRows(x) => {
                let (n, m) = dims2(self.value(*x));
                acc(*x, &mut |g| {
                    for row in g.chunks_mut(m) {
                        for j in 0..m {
                            row[j] += u[j] / n as f64;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += u[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += u[0] / n));
            }
            Op::Gather { table, ids } => {
                let d = out.cols();
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += u[r * d + j];
                        }
                    }
                });
            }
            Op::ScatterRows { x, positions } => {
                let d = out.cols();
                acc(*x, &mut |g| {
                    for (s, &p) in positions.iter().enumerate() {
                        for j in 0..d {
                            g[s * d + j] += u[p * d + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| g.iter_mut().zip(u).for_each(|(g, u)| *g += u)),
            Op::RowScale(x, s) => {
                let m = out.cols();
                let vx = self.value(*x).data();
                let vs = self.value(*s).data();
                acc(*x, &mut |g| {
                    for (i, gate) in vs.iter().enumerate() {
                        for j in 0..m {
                            g[i * m + j] += u[i * m + j] * gate;
                        }
                    }
                });
                acc(*s, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dot(&u[i * m..(i + 1) * m], &vx[i * m..(i + 1) * m]);
                    }
                });
            }
            Op::RowNormalize { x, norms } => {
                let m = out.cols();
                let y = out.data();
                acc(*x, &mut |g| {
                    for (i, &norm) in norms.iter().enumerate() {
                        if norm < NORM_FLOOR {
                            continue;
                        }
                        let yr = &y[i * m..(i + 1) * m];
                        let ur = &u[i * m..(i + 1) * m];
                        let proj = dot(yr, ur);
                        for j in 0..m {
                            g[i * m + j] += (ur[j] - yr[j] * proj) / norm;
                        }
                    }
                });
            }
            Op::PickPerRow { x, idx } => {
                let m = self.value(*x).cols();
                acc(*x, &mut |g| {
                    for (i, &j) in idx.iter().enumerate() {
                        g[i * m + j] += u[i];
                    }
                });
            }
            Op::WeightedSum { x, weights } => acc(*x, &mut |g| {
                g.iter_mut().zip(weights.data()).for_each(|(g, w)| *g += w * u[0]);
            }),
        }
        Ok(())
    }
}

/// Norm below which a row is treated as the zero vector.
pub const NORM_FLOOR: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_selects_column() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.input(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let b = g.input(mat(&[vec![1.0], vec![0.0]])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_config_error() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(LeoError::Config(_))));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.input(mat(&[vec![0.0, 0.0]])).unwrap();
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn max_pool_full_window() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.input(mat(&[vec![1.0], vec![5.0], vec![2.0]])).unwrap();
        let p = g.max_pool(a, &[3]).unwrap();
        assert_eq!(g.value(p).data(), &[5.0]);
    }

    #[test]
    fn non_finite_output_names_node() {
        let mut g = Graph::new(Mode::Eval);
        let a = g.input(Tensor::vector(vec![0.0])).unwrap();
        match g.log(a) {
            Err(LeoError::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn square_gradient() {
        let mut store = ParameterStore::new();
        let w = store.insert("w", ParamGroup::Classifier, Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new(Mode::Train);
        let wn = g.param(&store, w).unwrap();
        let loss = g.mul(wn, wn).unwrap();
        g.backward(loss).unwrap().accumulate(&mut store);
        assert_eq!(store.get(w).grad.item(), 6.0);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut g = Graph::new(Mode::Train);
        let logits = g.variable(mat(&[vec![0.3, -1.2, 2.0]])).unwrap();
        let probs = g.softmax(logits).unwrap();
        let logp = g.log(probs).unwrap();
        let picked = g.pick(logp, Rc::new(vec![1])).unwrap();
        let nll = g.scale(picked, -1.0).unwrap();
        let loss = g.sum(nll).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = g.value(probs).data().to_vec();
        let gl = grads.of(logits).unwrap().data();
        let expected = [p[0], p[1] - 1.0, p[2]];
        for (a, b) in gl.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut g = Graph::new(Mode::Train);
        let a = g.variable(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.backward(a), Err(LeoError::Usage(_))));
    }

    #[test]
    fn unreachable_param_gets_no_gradient() {
        let mut store = ParameterStore::new();
        let w = store.insert("w", ParamGroup::Classifier, Tensor::scalar(2.0)).unwrap();
        let v = store.insert("v", ParamGroup::Selector, Tensor::scalar(5.0)).unwrap();
        let mut g = Graph::new(Mode::Train);
        let wn = g.param(&store, w).unwrap();
        let _vn = g.param(&store, v).unwrap();
        let loss = g.mul(wn, wn).unwrap();
        g.backward(loss).unwrap().accumulate(&mut store);
        assert_eq!(store.get(v).grad.item(), 0.0);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut g = Graph::new(Mode::Eval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(g.dropout(a, 0.8, &mut rng).unwrap(), a);
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut g = Graph::new(Mode::Train);
        let a = g.input(Tensor::filled(&[n], 1.5)).unwrap();
        let d = g.dropout(a, 0.8, &mut rng).unwrap();
        let mean = g.value(d).sum() / n as f64;
        assert!((mean - 1.5).abs() / 1.5 < 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_is_deterministic_under_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new(Mode::Train);
            let a = g.input(Tensor::filled(&[64], 1.0)).unwrap();
            let d = g.dropout(a, 0.8, &mut rng).unwrap();
            g.value(d).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn off_diag_log_softmax_rows() {
        let mut g = Graph::new(Mode::Eval);
        let s = g.input(mat(&[vec![9.0, 1.0, 1.0], vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0]])).unwrap();
        let l = g.off_diag_log_softmax(s).unwrap();
        let v = g.value(l);
        assert_eq!(v.row(0)[0], 0.0);
        assert!((v.row(0)[1] - 0.5f64.ln()).abs() < 1e-15);
        let expect = 1.0 - (1.0f64.exp() + 2.0f64.exp()).ln();
        assert!((v.row(2)[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn conv_on_short_segment_is_rejected() {
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(Tensor::zeros(&[2, 1])).unwrap();
        let w = g.input(Tensor::zeros(&[3, 1, 1])).unwrap();
        let b = g.input(Tensor::zeros(&[1])).unwrap();
        assert!(g.conv1d(x, w, b, Rc::new(vec![2])).is_err());
    }
}
