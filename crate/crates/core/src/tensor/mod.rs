//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit and two-dimensional (scalars are `[1, 1]`, vectors
//! are single rows). Ops append nodes to a [`Tape`] and return [`Var`]
//! handles; [`Tape::backward`] walks the recorded graph in reverse and
//! accumulates gradients. Repeated backward calls without a reset keep
//! accumulating; zeroing is the caller's job.
//!
//! Every forward op checks its output for NaN/Inf and fails instead of
//! letting non-finite values propagate.

mod adam;
mod params;

pub use adam::{adam_step, AdamState};
pub use params::{BoundParams, Parameter, ParameterSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("masked_softmax: every position is masked")]
    AllMasked,
    #[error("l2_normalize: row {row} has zero norm")]
    ZeroNormRow { row: usize },
    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("head count {heads} does not divide model dimension {dim}")]
    HeadSplit { dim: usize, heads: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` defined twice")]
    DuplicateParameter(String),
    #[error("optimizer state for `{name}` does not match the parameter shape")]
    StaleOptimizerState { name: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense 2-D tensor: row-major values plus an optional same-shape gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: [usize; 2],
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: [usize; 2], values: Vec<f64>) -> Result<Self> {
        if shape[0] * shape[1] != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("{}x{} vs {} values", shape[0], shape[1], values.len()),
            });
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: [usize; 2]) -> Self {
        Self {
            shape,
            values: vec![0.0; shape[0] * shape[1]],
            grad: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.shape[1]..(r + 1) * self.shape[1]]
    }

    /// Adds `g` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.values.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (slot, &v) in grad.iter_mut().zip(g) {
            *slot += v;
        }
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// Matrix plus a single row broadcast over every row (bias add).
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    /// Sum of all entries, producing a scalar.
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    MaskedSoftmax {
        logits: Var,
        mask: Vec<bool>,
    },
    L2NormalizeRows(Var),
    SliceRows {
        x: Var,
        start: usize,
        count: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        count: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation graph. Node inputs always precede the node, so
/// reverse creation order is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.values()
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v), [1, 1]);
        self.nodes[v.0].tensor.values()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Leaf that gradients flow into (parameters).
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push_unchecked(tensor, Op::Leaf, true)
    }

    /// Leaf treated as a constant: backward never visits it.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_unchecked(tensor, Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: [usize; 2], values: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, values)?))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor {
            shape: [1, 1],
            values: vec![value],
            grad: None,
        })
    }

    pub fn zeros(&mut self, shape: [usize; 2]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: [usize; 2],
        values: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = self.op_needs_grad(&op);
        Ok(self.push_unchecked(
            Tensor {
                shape,
                values,
                grad: None,
            },
            op,
            needs_grad,
        ))
    }

    fn push_unchecked(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let dep = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                dep(a) || dep(b)
            }
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::L2NormalizeRows(a) => dep(a),
            Op::LayerNorm { x, gamma, beta, .. } => dep(x) || dep(gamma) || dep(beta),
            Op::MaskedSoftmax { logits, .. } => dep(logits),
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => dep(x),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(dep),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<[usize; 2]> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{}x{} vs {}x{}", sa[0], sa[1], sb[0], sb[1]),
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push("add", shape, values, Op::Add(a, b))
    }

    /// `a` is `[r, c]`, `bias` is `[1, c]`; the bias row is added to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if self.shape(bias) != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("matrix {}x{} vs bias {:?}", r, c, self.shape(bias)),
            });
        }
        let mut values = self.values(a).to_vec();
        let b = self.values(bias);
        for row in values.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push("add_row", [r, c], values, Op::AddRow(a, bias))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        self.push("sub", shape, values, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", shape, values, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let shape = self.shape(a);
        let values = self.values(a).iter().map(|x| x * factor).collect();
        self.push("scale", shape, values, Op::Scale(a, factor))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.shape(a);
        let values = self.values(a).iter().map(|x| x + c).collect();
        self.push("add_const", shape, values, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, ka] = self.shape(a);
        let [kb, n] = self.shape(b);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} . {}x{}", m, ka, kb, n),
            });
        }
        let values = matmul_raw(self.values(a), self.values(b), m, ka, n);
        self.push("matmul", [m, n], values, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        let src = self.values(a);
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", [c, r], values, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let values = self.values(a).iter().map(|&x| x.max(0.0)).collect();
        self.push("relu", shape, values, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.values(a).iter().sum();
        self.push("sum", [1, 1], vec![total], Op::Sum(a))
    }

    /// Row-wise layer normalization with affine parameters (`gamma`, `beta`
    /// are `[1, c]`). Variance is the population variance over each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [r, c] = self.shape(x);
        if self.shape(gamma) != [1, c] || self.shape(beta) != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x {}x{} vs gamma {:?} beta {:?}",
                    r,
                    c,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let mut values = vec![0.0; r * c];
        {
            let xs = self.values(x);
            let g = self.values(gamma);
            let b = self.values(beta);
            for i in 0..r {
                let row = &xs[i * c..(i + 1) * c];
                let (mean, inv_std) = row_norm_stats(row, eps);
                for j in 0..c {
                    values[i * c + j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        self.push(
            "layer_norm",
            [r, c],
            values,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    /// Row-wise softmax over the unmasked columns. Masked columns get exactly
    /// zero probability and contribute nothing to any row, so growing the
    /// masked padding never perturbs the unmasked outputs.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let [r, c] = self.shape(logits);
        if mask.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("{} columns vs mask length {}", c, mask.len()),
            });
        }
        if mask.iter().all(|&m| m) {
            return Err(TensorError::AllMasked);
        }
        let mut values = vec![0.0; r * c];
        {
            let xs = self.values(logits);
            for i in 0..r {
                let row = &xs[i * c..(i + 1) * c];
                let max = row
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| !m)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..c {
                    if !mask[j] {
                        let e = (row[j] - max).exp();
                        values[i * c + j] = e;
                        denom += e;
                    }
                }
                for j in 0..c {
                    values[i * c + j] /= denom;
                }
            }
        }
        self.push(
            "masked_softmax",
            [r, c],
            values,
            Op::MaskedSoftmax {
                logits,
                mask: mask.to_vec(),
            },
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        let mut values = vec![0.0; r * c];
        {
            let xs = self.values(x);
            for i in 0..r {
                let row = &xs[i * c..(i + 1) * c];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm <= 0.0 {
                    return Err(TensorError::ZeroNormRow { row: i });
                }
                for j in 0..c {
                    values[i * c + j] = row[j] / norm;
                }
            }
        }
        self.push("l2_normalize", [r, c], values, Op::L2NormalizeRows(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if start + count > r {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} of {}", start, start + count, r),
            });
        }
        let values = self.values(x)[start * c..(start + count) * c].to_vec();
        self.push(
            "slice_rows",
            [count, c],
            values,
            Op::SliceRows { x, start, count },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if start + count > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {}..{} of {}", start, start + count, c),
            });
        }
        let src = self.values(x);
        let mut values = vec![0.0; r * count];
        for i in 0..r {
            values[i * count..(i + 1) * count]
                .copy_from_slice(&src[i * c + start..i * c + start + count]);
        }
        self.push(
            "slice_cols",
            [r, count],
            values,
            Op::SliceCols { x, start, count },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let c = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let [pr, pc] = self.shape(p);
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts {} vs {}", c, pc),
                });
            }
            rows += pr;
            values.extend_from_slice(self.values(p));
        }
        self.push(
            "concat_rows",
            [rows, c],
            values,
            Op::ConcatRows(parts.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let r = self.shape(parts[0])[0];
        let total_c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        for &p in parts {
            if self.shape(p)[0] != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", r, self.shape(p)[0]),
                });
            }
        }
        let mut values = vec![0.0; r * total_c];
        let mut col0 = 0;
        for &p in parts {
            let pc = self.shape(p)[1];
            let src = self.values(p);
            for i in 0..r {
                values[i * total_c + col0..i * total_c + col0 + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            col0 += pc;
        }
        self.push(
            "concat_cols",
            [r, total_c],
            values,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate into the
    /// tape nodes; call repeatedly and they keep adding up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let [r, c] = self.shape(root);
        if r != 1 || c != 1 {
            return Err(TensorError::NonScalarRoot { rows: r, cols: c });
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        pending[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            self.nodes[id].tensor.accumulate_grad(&grad);
            let op = self.nodes[id].op.clone();
            self.propagate(&op, id, &grad, &mut pending);
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, id: usize, dy: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let send = |pending: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut pending[v.0] {
                Some(acc) => {
                    for (slot, gv) in acc.iter_mut().zip(&g) {
                        *slot += gv;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };

        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(pending, *a, dy.to_vec());
                send(pending, *b, dy.to_vec());
            }
            Op::AddRow(a, bias) => {
                send(pending, *a, dy.to_vec());
                let c = self.shape(*bias)[1];
                let mut gb = vec![0.0; c];
                for row in dy.chunks(c) {
                    for (slot, v) in gb.iter_mut().zip(row) {
                        *slot += v;
                    }
                }
                send(pending, *bias, gb);
            }
            Op::Sub(a, b) => {
                send(pending, *a, dy.to_vec());
                send(pending, *b, dy.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ga = dy.iter().zip(self.values(*b)).map(|(g, v)| g * v).collect();
                let gb = dy.iter().zip(self.values(*a)).map(|(g, v)| g * v).collect();
                send(pending, *a, ga);
                send(pending, *b, gb);
            }
            Op::Scale(a, f) => {
                send(pending, *a, dy.iter().map(|v| v * f).collect());
            }
            Op::AddConst(a) => {
                send(pending, *a, dy.to_vec());
            }
            Op::Matmul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[1];
                // dA = dC . B^T ; dB = A^T . dC
                let bt = transpose_raw(self.values(*b), k, n);
                let ga = matmul_raw(dy, &bt, m, n, k);
                let at = transpose_raw(self.values(*a), m, k);
                let gb = matmul_raw(&at, dy, k, m, n);
                send(pending, *a, ga);
                send(pending, *b, gb);
            }
            Op::Transpose(a) => {
                let [r, c] = self.shape(*a);
                send(pending, *a, transpose_raw(dy, c, r));
            }
            Op::Relu(a) => {
                let g = self
                    .values(*a)
                    .iter()
                    .zip(dy)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                send(pending, *a, g);
            }
            Op::Sum(a) => {
                let n = self.values(*a).len();
                send(pending, *a, vec![dy[0]; n]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let [r, c] = self.shape(*x);
                let xs = self.values(*x);
                let g = self.values(*gamma);
                let mut gx = vec![0.0; r * c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for i in 0..r {
                    let row = &xs[i * c..(i + 1) * c];
                    let dyr = &dy[i * c..(i + 1) * c];
                    let (mean, inv_std) = row_norm_stats(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxh = dyr[j] * g[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                        ggamma[j] += dyr[j] * xhat[j];
                        gbeta[j] += dyr[j];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let dxh = dyr[j] * g[j];
                        gx[i * c + j] = (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv_std;
                    }
                }
                send(pending, *x, gx);
                send(pending, *gamma, ggamma);
                send(pending, *beta, gbeta);
            }
            Op::MaskedSoftmax { logits, mask } => {
                let [r, c] = self.shape(*logits);
                let probs = self.nodes[id].tensor.values();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let p = &probs[i * c..(i + 1) * c];
                    let dyr = &dy[i * c..(i + 1) * c];
                    let dot: f64 = p.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        if !mask[j] {
                            gx[i * c + j] = p[j] * (dyr[j] - dot);
                        }
                    }
                }
                send(pending, *logits, gx);
            }
            Op::L2NormalizeRows(x) => {
                let [r, c] = self.shape(*x);
                let xs = self.values(*x);
                let ys = self.nodes[id].tensor.values();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let xrow = &xs[i * c..(i + 1) * c];
                    let yrow = &ys[i * c..(i + 1) * c];
                    let dyr = &dy[i * c..(i + 1) * c];
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yrow.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = (dyr[j] - yrow[j] * dot) / norm;
                    }
                }
                send(pending, *x, gx);
            }
            Op::SliceRows { x, start, count } => {
                let [r, c] = self.shape(*x);
                let mut gx = vec![0.0; r * c];
                gx[start * c..(start + count) * c].copy_from_slice(dy);
                send(pending, *x, gx);
            }
            Op::SliceCols { x, start, count } => {
                let [r, c] = self.shape(*x);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + count]
                        .copy_from_slice(&dy[i * count..(i + 1) * count]);
                }
                send(pending, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let [pr, pc] = self.shape(p);
                    send(pending, p, dy[offset..offset + pr * pc].to_vec());
                    offset += pr * pc;
                }
            }
            Op::ConcatCols(parts) => {
                let r = self.shape(parts[0])[0];
                let total_c: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut col0 = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    let mut g = vec![0.0; r * pc];
                    for i in 0..r {
                        g[i * pc..(i + 1) * pc]
                            .copy_from_slice(&dy[i * total_c + col0..i * total_c + col0 + pc]);
                    }
                    send(pending, p, g);
                    col0 += pc;
                }
            }
        }
    }
}

fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
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

/// Weights for one multi-head self-attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Weights for a two-layer MLP with a ReLU between the affine maps.
#[derive(Debug, Clone, Copy)]
pub struct MlpWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Multi-head scaled dot-product self-attention over the unmasked positions.
///
/// Each head attends with scale `1/sqrt(d/heads)`; head outputs are
/// concatenated and passed through the output projection. Returns the block
/// output and one attention-probability matrix per head.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    w: &AttentionWeights,
    mask: &[bool],
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let [n, d] = tape.shape(x);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::HeadSplit { dim: d, heads });
    }
    if mask.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!("sequence {} vs mask length {}", n, mask.len()),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(x, w.wq)?;
    let q = tape.add_row(q, w.bq)?;
    let k = tape.matmul(x, w.wk)?;
    let k = tape.add_row(k, w.bk)?;
    let v = tape.matmul(x, w.wv)?;
    let v = tape.add_row(v, w.bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    let mut attentions = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let probs = tape.masked_softmax(logits, mask)?;
        let out = tape.matmul(probs, vh)?;
        head_outputs.push(out);
        attentions.push(probs);
    }
    let cat = tape.concat_cols(&head_outputs)?;
    let projected = tape.matmul(cat, w.wo)?;
    let out = tape.add_row(projected, w.bo)?;
    Ok((out, attentions))
}

/// Two affine layers with a ReLU in between.
pub fn mlp(tape: &mut Tape, x: Var, w: &MlpWeights) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_row(h, w.b1)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, w.w2)?;
    tape.add_row(out, w.b2)
}
