//! Dense tensor arithmetic with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation on an append-only tape. Node indices
//! are handed out as [`TensorId`]s; because an op can only reference ids
//! that already exist, the tape is a DAG in topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//!
//! Everything is `f64`: finite-difference gradient checks at 1e-4 relative
//! tolerance are not reliable in single precision.
//!
//! A graph is confined to one logical execution stream. Distinct graphs may
//! run concurrently; [`Tensor`] values are plain data and freely shareable.

use crate::error::{Error, Result};

/// Safety margin keeping `acos` inputs away from the infinite-derivative
/// endpoints at +-1.
pub const ACOS_GUARD: f64 = 1e-7;
/// How far a "cosine" may stray outside [-1, 1] from rounding before it is
/// treated as a genuine domain error.
pub const COS_DOMAIN_TOL: f64 = 1e-6;
/// Rows with an L2 norm at or below this cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-30;

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                detail: format!("expected a rank-2 tensor, got shape {other:?}"),
            }),
        }
    }

    #[inline]
    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[1];
        self.data[row * cols + col]
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Per-target-class margin transforms in cosine space. The transform is
/// applied to the true-class entry of a cosine matrix; all other entries
/// pass through. `scale` multiplies every entry afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginKind {
    /// No margin: s * cos(theta) everywhere.
    None,
    /// Cosine-space offset: s * (cos(theta) - m).
    CosineOffset(f64),
    /// Additive angular margin: s * cos(theta + m), with theta + m clamped
    /// to pi (clamp events are counted in [`Diagnostics`]).
    AngleOffset(f64),
    /// Multiplicative angular margin: s * cos(m * theta). A margin of zero
    /// disables the transform rather than collapsing every target to cos(0).
    AngleScale(f64),
}

/// Counters for numeric events worth surfacing after a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Target entries where theta + m exceeded pi and the logit was clamped.
    pub margin_clamp_events: usize,
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Matmul(TensorId, TensorId),
    MatmulNT(TensorId, TensorId),
    Relu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Cos(TensorId),
    Acos(TensorId),
    Clamp(TensorId, f64, f64),
    Sum(TensorId),
    Mean(TensorId),
    RowSum(TensorId),
    L2Norm(TensorId),
    NormalizeRows(TensorId),
    GatherRows(TensorId, Vec<usize>),
    Standardize(TensorId, f64),
    SoftmaxXent(TensorId, Vec<usize>),
    TargetMargin {
        input: TensorId,
        labels: Vec<usize>,
        scale: f64,
        kind: MarginKind,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    /// Accumulated adjoint for leaves created with [`Graph::param`].
    grad: Option<Vec<f64>>,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    diagnostics: Diagnostics,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a `param` leaf; `None` before any backward
    /// pass has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    /// Add a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (n, c) = self.val(a).rank2("add_row")?;
        let r = self.val(row);
        if r.shape() != [c] {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("row shape {:?} does not match {c} columns", r.shape()),
            });
        }
        let mut data = self.val(a).data().to_vec();
        for i in 0..n {
            for j in 0..c {
                data[i * c + j] += self.val(row).data()[j];
            }
        }
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AddRow(a, row), value, needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.val(a).data().iter().map(|x| x + c).collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a);
        self.push(Op::AddScalar(a), value, needs)
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.val(a).data().iter().map(|x| x * c).collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a);
        self.push(Op::MulScalar(a, c), value, needs)
    }

    /// `a (n x k) . b (k x m) -> n x m`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, k) = self.val(a).rank2("matmul")?;
        let (k2, m) = self.val(b).rank2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let value = Tensor {
            shape: vec![n, m],
            data: matmul_nn(self.val(a).data(), self.val(b).data(), n, k, m),
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), value, needs))
    }

    /// `a (n x d) . b^T (d x c) -> n x c`, with `b` stored row-per-class
    /// as `c x d`.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, d) = self.val(a).rank2("matmul_nt")?;
        let (c, d2) = self.val(b).rank2("matmul_nt")?;
        if d != d2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                detail: format!("inner dims {d} vs {d2}"),
            });
        }
        let va = self.val(a).data();
        let vb = self.val(b).data();
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += va[i * d + t] * vb[j * d + t];
                }
                data[i * c + j] = acc;
            }
        }
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNT(a, b), value, needs))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.val(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a);
        self.push(Op::Relu(a), value, needs)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data = self.val(a).data().iter().map(|x| x.exp()).collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a);
        self.push(Op::Exp(a), value, needs)
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if self.val(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: "input must be strictly positive".into(),
            });
        }
        let data = self.val(a).data().iter().map(|x| x.ln()).collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a);
        Ok(self.push(Op::Log(a), value, needs))
    }

    pub fn cos(&mut self, a: TensorId) -> TensorId {
        let data = self.val(a).data().iter().map(|x| x.cos()).collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a);
        self.push(Op::Cos(a), value, needs)
    }

    /// Arc cosine with inputs clamped to `[-1 + ACOS_GUARD, 1 - ACOS_GUARD]`
    /// so the derivative stays bounded. Inputs outside `[-1, 1]` by more
    /// than [`COS_DOMAIN_TOL`] are rejected.
    pub fn acos(&mut self, a: TensorId) -> Result<TensorId> {
        if let Some(bad) = self
            .val(a)
            .data()
            .iter()
            .find(|&&x| !(-1.0 - COS_DOMAIN_TOL..=1.0 + COS_DOMAIN_TOL).contains(&x))
        {
            return Err(Error::Domain {
                op: "acos",
                detail: format!("input {bad} outside [-1, 1]"),
            });
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .map(|&x| acos_clamped(x).acos())
            .collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a);
        Ok(self.push(Op::Acos(a), value, needs))
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let data = self.val(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
        let value = Tensor {
            shape: self.val(a).shape.clone(),
            data,
        };
        let needs = self.needs(a);
        self.push(Op::Clamp(a, lo, hi), value, needs)
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.val(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(total), needs)
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let len = self.val(a).len();
        if len == 0 {
            return Err(Error::Domain {
                op: "mean",
                detail: "mean of an empty tensor".into(),
            });
        }
        let total: f64 = self.val(a).data().iter().sum();
        let needs = self.needs(a);
        Ok(self.push(Op::Mean(a), Tensor::scalar(total / len as f64), needs))
    }

    /// Sum each row of a matrix: `n x c -> n`.
    pub fn row_sum(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, c) = self.val(a).rank2("row_sum")?;
        let mut data = vec![0.0; n];
        for (i, slot) in data.iter_mut().enumerate() {
            for j in 0..c {
                *slot += self.val(a).data()[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::RowSum(a), Tensor::vector(data), needs))
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, a: TensorId) -> TensorId {
        let norm = self.val(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let needs = self.needs(a);
        self.push(Op::L2Norm(a), Tensor::scalar(norm), needs)
    }

    /// Scale each row of a matrix to unit L2 norm. Rows with (near-)zero
    /// norm trip a numeric guard instead of emitting NaNs.
    pub fn normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, c) = self.val(a).rank2("normalize_rows")?;
        let mut data = self.val(a).data().to_vec();
        for i in 0..n {
            let row = &mut data[i * c..(i + 1) * c];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm.is_finite() && norm > MIN_ROW_NORM) {
                return Err(Error::NumericGuard(format!(
                    "cannot normalize row {i}: L2 norm {norm:e}"
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        let needs = self.needs(a);
        Ok(self.push(Op::NormalizeRows(a), value, needs))
    }

    /// Select rows of a matrix by index (rows may repeat).
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> Result<TensorId> {
        let (n, c) = self.val(a).rank2("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row index {bad} out of range for {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&self.val(a).data()[r * c..(r + 1) * c]);
        }
        let value = Tensor {
            shape: vec![rows.len(), c],
            data,
        };
        let needs = self.needs(a);
        Ok(self.push(Op::GatherRows(a, rows.to_vec()), value, needs))
    }

    /// Standardize each column over the batch: per column j,
    /// `y_ij = (x_ij - mean_j) / sqrt(var_j + eps)` with the population
    /// variance. The batch-statistics normalization used on embedding
    /// layers.
    pub fn standardize(&mut self, a: TensorId, eps: f64) -> Result<TensorId> {
        let (n, c) = self.val(a).rank2("standardize")?;
        if n == 0 {
            return Err(Error::Shape {
                op: "standardize",
                detail: "cannot standardize an empty batch".into(),
            });
        }
        let v = self.val(a).data();
        let mut data = vec![0.0; n * c];
        for j in 0..c {
            let (mean, var) = column_stats(v, n, c, j);
            let inv = 1.0 / (var + eps).sqrt();
            for i in 0..n {
                data[i * c + j] = (v[i * c + j] - mean) * inv;
            }
        }
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        let needs = self.needs(a);
        Ok(self.push(Op::Standardize(a, eps), value, needs))
    }

    /// Per-row softmax cross-entropy against integer labels: `n x c -> n`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId> {
        let (n, c) = self.val(logits).rank2("softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for {n} rows", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} out of range for {c} classes"),
            });
        }
        let mut losses = vec![0.0; n];
        for i in 0..n {
            let row = &self.val(logits).data()[i * c..(i + 1) * c];
            losses[i] = log_sum_exp(row) - row[labels[i]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxXent(logits, labels.to_vec()),
            Tensor::vector(losses),
            needs,
        ))
    }

    /// Apply a per-target-class margin in cosine space and scale all
    /// entries: the core transform behind the margin softmax family.
    ///
    /// Inputs must be cosines in `[-1, 1]` (up to [`COS_DOMAIN_TOL`]).
    pub fn target_margin(
        &mut self,
        cosines: TensorId,
        labels: &[usize],
        scale: f64,
        kind: MarginKind,
    ) -> Result<TensorId> {
        let (n, c) = self.val(cosines).rank2("target_margin")?;
        if labels.len() != n {
            return Err(Error::Shape {
                op: "target_margin",
                detail: format!("{} labels for {n} rows", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Shape {
                op: "target_margin",
                detail: format!("label {bad} out of range for {c} classes"),
            });
        }
        if let Some(bad) = self
            .val(cosines)
            .data()
            .iter()
            .find(|&&x| !(-1.0 - COS_DOMAIN_TOL..=1.0 + COS_DOMAIN_TOL).contains(&x))
        {
            return Err(Error::Domain {
                op: "target_margin",
                detail: format!("cosine {bad} outside [-1, 1]"),
            });
        }

        let mut data = Vec::with_capacity(n * c);
        let mut clamp_events = 0usize;
        for (i, &label) in labels.iter().enumerate() {
            for j in 0..c {
                let x = self.val(cosines).data()[i * c + j];
                let v = if j == label {
                    let (v, clamped) = margin_forward(x, kind);
                    if clamped {
                        clamp_events += 1;
                    }
                    v
                } else {
                    x
                };
                data.push(scale * v);
            }
        }
        self.diagnostics.margin_clamp_events += clamp_events;
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        let needs = self.needs(cosines);
        Ok(self.push(
            Op::TargetMargin {
                input: cosines,
                labels: labels.to_vec(),
                scale,
                kind,
            },
            value,
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients of `param` leaves
    /// accumulate across calls; use [`Graph::zero_grads`] to reset.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.val(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Contract(
                "loss does not depend on any differentiable leaf".into(),
            ));
        }

        // Per-call adjoints; only leaf grads persist on the nodes.
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(out_grad) = adj[idx].take() else {
                continue;
            };
            self.propagate(idx, &out_grad, &mut adj);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
                for (g, o) in grad.iter_mut().zip(&out_grad) {
                    *g += o;
                }
            }
        }
        Ok(())
    }

    fn accumulate(
        adj: &mut [Option<Vec<f64>>],
        id: TensorId,
        len: usize,
        f: impl FnOnce(&mut [f64]),
    ) {
        let slot = adj[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for input in [*a, *b] {
                    if self.needs(input) {
                        Self::accumulate(adj, input, self.val(input).len(), |dst| {
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d += gv;
                            }
                        });
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (n, c) = (self.val(*a).shape[0], self.val(*a).shape[1]);
                if self.needs(*a) {
                    Self::accumulate(adj, *a, n * c, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    });
                }
                if self.needs(*row) {
                    Self::accumulate(adj, *row, c, |dst| {
                        for i in 0..n {
                            for j in 0..c {
                                dst[j] += g[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, self.val(*a).len(), |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accumulate(adj, *b, self.val(*b).len(), |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d -= gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.val(*b).data();
                    Self::accumulate(adj, *a, self.val(*a).len(), |dst| {
                        for i in 0..dst.len() {
                            dst[i] += g[i] * vb[i];
                        }
                    });
                }
                if self.needs(*b) {
                    let va = self.val(*a).data();
                    Self::accumulate(adj, *b, self.val(*b).len(), |dst| {
                        for i in 0..dst.len() {
                            dst[i] += g[i] * va[i];
                        }
                    });
                }
            }
            Op::AddScalar(a) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, self.val(*a).len(), |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::MulScalar(a, c) => {
                if self.needs(*a) {
                    let c = *c;
                    Self::accumulate(adj, *a, self.val(*a).len(), |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += c * gv;
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (n, k) = (self.val(*a).shape[0], self.val(*a).shape[1]);
                let m = self.val(*b).shape[1];
                if self.needs(*a) {
                    // dA = g . B^T
                    let vb = self.val(*b).data();
                    Self::accumulate(adj, *a, n * k, |dst| {
                        for i in 0..n {
                            for j in 0..m {
                                let gv = g[i * m + j];
                                for t in 0..k {
                                    dst[i * k + t] += gv * vb[t * m + j];
                                }
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    // dB = A^T . g
                    let va = self.val(*a).data();
                    Self::accumulate(adj, *b, k * m, |dst| {
                        for i in 0..n {
                            for t in 0..k {
                                let av = va[i * k + t];
                                for j in 0..m {
                                    dst[t * m + j] += av * g[i * m + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::MatmulNT(a, b) => {
                let (n, d) = (self.val(*a).shape[0], self.val(*a).shape[1]);
                let c = self.val(*b).shape[0];
                if self.needs(*a) {
                    // dA = g . B
                    let vb = self.val(*b).data();
                    Self::accumulate(adj, *a, n * d, |dst| {
                        for i in 0..n {
                            for j in 0..c {
                                let gv = g[i * c + j];
                                for t in 0..d {
                                    dst[i * d + t] += gv * vb[j * d + t];
                                }
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    // dB = g^T . A
                    let va = self.val(*a).data();
                    Self::accumulate(adj, *b, c * d, |dst| {
                        for i in 0..n {
                            for j in 0..c {
                                let gv = g[i * c + j];
                                for t in 0..d {
                                    dst[j * d + t] += gv * va[i * d + t];
                                }
                            }
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let va = self.val(*a).data();
                    Self::accumulate(adj, *a, va.len(), |dst| {
                        for i in 0..dst.len() {
                            if va[i] > 0.0 {
                                dst[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let out = node.value.data();
                    Self::accumulate(adj, *a, out.len(), |dst| {
                        for i in 0..dst.len() {
                            dst[i] += g[i] * out[i];
                        }
                    });
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let va = self.val(*a).data();
                    Self::accumulate(adj, *a, va.len(), |dst| {
                        for i in 0..dst.len() {
                            dst[i] += g[i] / va[i];
                        }
                    });
                }
            }
            Op::Cos(a) => {
                if self.needs(*a) {
                    let va = self.val(*a).data();
                    Self::accumulate(adj, *a, va.len(), |dst| {
                        for i in 0..dst.len() {
                            dst[i] -= g[i] * va[i].sin();
                        }
                    });
                }
            }
            Op::Acos(a) => {
                if self.needs(*a) {
                    let va = self.val(*a).data();
                    Self::accumulate(adj, *a, va.len(), |dst| {
                        for i in 0..dst.len() {
                            let x = acos_clamped(va[i]);
                            dst[i] -= g[i] / (1.0 - x * x).sqrt();
                        }
                    });
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(*a) {
                    let va = self.val(*a).data();
                    let (lo, hi) = (*lo, *hi);
                    Self::accumulate(adj, *a, va.len(), |dst| {
                        for i in 0..dst.len() {
                            if va[i] > lo && va[i] < hi {
                                dst[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let gv = g[0];
                    Self::accumulate(adj, *a, self.val(*a).len(), |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let len = self.val(*a).len();
                    let gv = g[0] / len as f64;
                    Self::accumulate(adj, *a, len, |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
            }
            Op::RowSum(a) => {
                if self.needs(*a) {
                    let (n, c) = (self.val(*a).shape[0], self.val(*a).shape[1]);
                    Self::accumulate(adj, *a, n * c, |dst| {
                        for i in 0..n {
                            for j in 0..c {
                                dst[i * c + j] += g[i];
                            }
                        }
                    });
                }
            }
            Op::L2Norm(a) => {
                if self.needs(*a) {
                    let va = self.val(*a).data();
                    let norm = node.value.item();
                    let gv = g[0];
                    Self::accumulate(adj, *a, va.len(), |dst| {
                        if norm > 0.0 {
                            for i in 0..dst.len() {
                                dst[i] += gv * va[i] / norm;
                            }
                        }
                    });
                }
            }
            Op::NormalizeRows(a) => {
                if self.needs(*a) {
                    let (n, c) = (self.val(*a).shape[0], self.val(*a).shape[1]);
                    let va = self.val(*a).data();
                    let out = node.value.data();
                    Self::accumulate(adj, *a, n * c, |dst| {
                        for i in 0..n {
                            let x = &va[i * c..(i + 1) * c];
                            let y = &out[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                            let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                dst[i * c + j] += (gr[j] - y[j] * dot) / norm;
                            }
                        }
                    });
                }
            }
            Op::GatherRows(a, rows) => {
                if self.needs(*a) {
                    let c = self.val(*a).shape[1];
                    let len = self.val(*a).len();
                    Self::accumulate(adj, *a, len, |dst| {
                        for (k, &r) in rows.iter().enumerate() {
                            for j in 0..c {
                                dst[r * c + j] += g[k * c + j];
                            }
                        }
                    });
                }
            }
            Op::Standardize(a, eps) => {
                if self.needs(*a) {
                    let (n, c) = (self.val(*a).shape[0], self.val(*a).shape[1]);
                    let v = self.val(*a).data();
                    let y = node.value.data();
                    let eps = *eps;
                    Self::accumulate(adj, *a, n * c, |dst| {
                        for j in 0..c {
                            let (_, var) = column_stats(v, n, c, j);
                            let inv = 1.0 / (var + eps).sqrt();
                            let mut g_mean = 0.0;
                            let mut gy_mean = 0.0;
                            for i in 0..n {
                                g_mean += g[i * c + j];
                                gy_mean += g[i * c + j] * y[i * c + j];
                            }
                            g_mean /= n as f64;
                            gy_mean /= n as f64;
                            for i in 0..n {
                                dst[i * c + j] +=
                                    (g[i * c + j] - g_mean - y[i * c + j] * gy_mean) * inv;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxXent(logits, labels) => {
                if self.needs(*logits) {
                    let (n, c) = (self.val(*logits).shape[0], self.val(*logits).shape[1]);
                    let v = self.val(*logits).data();
                    Self::accumulate(adj, *logits, n * c, |dst| {
                        for i in 0..n {
                            let row = &v[i * c..(i + 1) * c];
                            let lse = log_sum_exp(row);
                            for j in 0..c {
                                let p = (row[j] - lse).exp();
                                let indicator = if j == labels[i] { 1.0 } else { 0.0 };
                                dst[i * c + j] += g[i] * (p - indicator);
                            }
                        }
                    });
                }
            }
            Op::TargetMargin {
                input,
                labels,
                scale,
                kind,
            } => {
                if self.needs(*input) {
                    let (n, c) = (self.val(*input).shape[0], self.val(*input).shape[1]);
                    let v = self.val(*input).data();
                    let (scale, kind) = (*scale, *kind);
                    Self::accumulate(adj, *input, n * c, |dst| {
                        for i in 0..n {
                            for j in 0..c {
                                let slope = if j == labels[i] {
                                    margin_derivative(v[i * c + j], kind)
                                } else {
                                    1.0
                                };
                                dst[i * c + j] += g[i * c + j] * scale * slope;
                            }
                        }
                    });
                }
            }
        }
    }
}

#[inline]
fn acos_clamped(x: f64) -> f64 {
    x.clamp(-1.0 + ACOS_GUARD, 1.0 - ACOS_GUARD)
}

/// Row-major `a (n x k) . b (k x m)`.
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * m..(t + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Mean and population variance of column `j` of an `n x c` matrix.
fn column_stats(v: &[f64], n: usize, c: usize, j: usize) -> (f64, f64) {
    let mut mean = 0.0;
    for i in 0..n {
        mean += v[i * c + j];
    }
    mean /= n as f64;
    let mut var = 0.0;
    for i in 0..n {
        let d = v[i * c + j] - mean;
        var += d * d;
    }
    (mean, var / n as f64)
}

/// Numerically stable log(sum(exp(row))).
fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Forward transform of a target-class cosine. Returns the transformed
/// value and whether the additive-angle clamp fired.
fn margin_forward(x: f64, kind: MarginKind) -> (f64, bool) {
    match kind {
        MarginKind::None => (x, false),
        MarginKind::CosineOffset(m) => (x - m, false),
        MarginKind::AngleOffset(m) => {
            // cos(theta + m) via the angle-sum identity keeps m = 0 an
            // exact identity. theta + m > pi  <=>  cos(theta) < -cos(m).
            if x < -m.cos() {
                (-1.0, true)
            } else {
                let sin_theta = (1.0 - (x * x).min(1.0)).sqrt();
                (x * m.cos() - sin_theta * m.sin(), false)
            }
        }
        MarginKind::AngleScale(m) => {
            if m == 0.0 {
                // Margin disabled; cos(0 * theta) would collapse every
                // target logit to the constant 1.
                (x, false)
            } else {
                ((m * acos_clamped(x).acos()).cos(), false)
            }
        }
    }
}

/// d(margin_forward)/dx for the target entry.
fn margin_derivative(x: f64, kind: MarginKind) -> f64 {
    match kind {
        MarginKind::None | MarginKind::CosineOffset(_) => 1.0,
        MarginKind::AngleOffset(m) => {
            if x < -m.cos() {
                0.0
            } else {
                let sin_theta = (1.0 - (x * x).min(1.0)).sqrt().max(ACOS_GUARD);
                m.cos() + x * m.sin() / sin_theta
            }
        }
        MarginKind::AngleScale(m) => {
            if m == 0.0 {
                1.0
            } else {
                let xc = acos_clamped(x);
                let theta = xc.acos();
                m * (m * theta).sin() / (1.0 - xc * xc).sqrt()
            }
        }
    }
}
