use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows that attend to each other causally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SqErr(Var, Var),
    Cosine(Var, Var),
    Pick(Var, Vec<usize>),
    WeightedSum(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    label: Option<String>,
}

/// Reverse-mode tape over dense row-major matrices.
///
/// Every primitive checks operand shapes and rejects non-finite outputs, so a
/// NaN is reported at the op that produced it rather than at the loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn shape(t: &Tensor) -> [usize; 2] {
    [t.nrows(), t.ncols()]
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_max(row: ndarray::ArrayView1<f64>) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
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

    /// First entry of a node's value; intended for `[1, 1]` losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        shape(&self.nodes[v.0].value)
    }

    fn label(&self, v: Var) -> String {
        match &self.nodes[v.0].label {
            Some(l) => format!("`{l}`"),
            None => format!("%{}", v.0),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.label(a),
            lhs_shape: self.shape(a),
            rhs: self.label(b),
            rhs_shape: self.shape(b),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: name,
                node: format!("%{}", self.nodes.len()),
            });
        }
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            op,
            param: None,
            label: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (no gradient is reported for it).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Records a named leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "input")?;
        self.nodes[v.0].label = Some(name.into());
        Ok(v)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).as_standard_layout().into_owned(),
            op: Op::Leaf,
            param: Some(id),
            label: Some(store.name(id).to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = av.dot(bv);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let out = av.dot(&bv.t());
        self.push(out, Op::MatMulT(a, b), "matmul_t")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a `[1, n]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != xv.ncols() {
            return Err(self.mismatch("add_row", x, row));
        }
        let out = xv + rv;
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    /// Scales each row of `x` by the matching entry of the `[m, 1]` column.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(col));
        if cv.ncols() != 1 || cv.nrows() != xv.nrows() {
            return Err(self.mismatch("mul_col", x, col));
        }
        let out = xv * cv;
        self.push(out, Op::MulCol(x, col), "mul_col")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c), "scale")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), "silu")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let m = row_max(row.view());
            row.mapv_inplace(|v| (v - m).exp());
            let z: f64 = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let m = row_max(row.view());
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out, Op::LogSoftmax(x), "log_softmax")
    }

    /// Concatenates along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        for &p in &parts[1..] {
            if self.value(p).nrows() != self.value(first).nrows() {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("row counts checked");
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.value(x).ncols();
        if start >= end || end > cols {
            return Err(Error::IndexOutOfRange {
                what: "slice_cols",
                index: end,
                size: cols,
            });
        }
        let out = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(x, start), "slice_cols")
    }

    /// Embedding lookup: rows of `table` at `idx`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(table).nrows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                what: "gather",
                index: bad,
                size: rows,
            });
        }
        let out = self.value(table).select(Axis(0), idx);
        self.push(out, Op::Gather(table, idx.to_vec()), "gather")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let out = Array2::from_elem((1, 1), self.value(x).sum() / n as f64);
        self.push(out, Op::Mean(x), "mean")
    }

    /// `Σ (a - b)²` as a `[1, 1]` tensor.
    pub fn sq_err(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_err", a, b)?;
        let total = Zip::from(self.value(a))
            .and(self.value(b))
            .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
        self.push(Array2::from_elem((1, 1), total), Op::SqErr(a, b), "sq_err")
    }

    /// Pairwise cosine similarity between rows of `a` `[m, d]` and rows of
    /// `b` `[n, d]`, giving `[m, n]`. A zero-norm row is an error.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(self.mismatch("cosine", a, b));
        }
        let na = row_norms(av);
        let nb = row_norms(bv);
        if let Some(row) = na.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroNorm {
                operand: self.label(a),
                row,
            });
        }
        if let Some(row) = nb.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroNorm {
                operand: self.label(b),
                row,
            });
        }
        let mut out = av.dot(&bv.t());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                *c /= na[i] * nb[j];
            }
        }
        self.push(out, Op::Cosine(a, b), "cosine")
    }

    /// Selects `x[i, idx[i]]` for every row, giving `[m, 1]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.len() != xv.nrows() {
            return Err(Error::DimensionMismatch {
                expected: xv.nrows(),
                got: idx.len(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.ncols()) {
            return Err(Error::IndexOutOfRange {
                what: "pick",
                index: bad,
                size: xv.ncols(),
            });
        }
        let out = Array2::from_shape_fn((idx.len(), 1), |(i, _)| xv[[i, idx[i]]]);
        self.push(out, Op::Pick(x, idx.to_vec()), "pick")
    }

    /// `Σ_i w_i Σ_j x_ij` with one weight per row, as `[1, 1]`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.nrows() {
            return Err(Error::DimensionMismatch {
                expected: xv.nrows(),
                got: weights.len(),
            });
        }
        let mut total = 0.0;
        for (row, &w) in xv.rows().into_iter().zip(weights) {
            total += w * row.sum();
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedSum(x, weights.to_vec()),
            "weighted_sum",
        )
    }

    /// Row-wise layer normalisation with learned `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).ncols();
        for p in [gamma, beta] {
            let pv = self.value(p);
            if pv.nrows() != 1 || pv.ncols() != n {
                return Err(self.mismatch("layer_norm", x, p));
            }
        }
        let xv = self.value(x);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Multi-head causal softmax attention within each segment.
    ///
    /// Row `i` of a segment attends to rows `0..=i` of the same segment only;
    /// scores are scaled by `1/sqrt(head_dim)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let [rows, d] = self.shape(q);
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "head count {heads} does not divide model dim {d}"
            )));
        }
        if let Some(seg) = segments.iter().find(|s| s.start + s.len > rows) {
            return Err(Error::IndexOutOfRange {
                what: "attention segment",
                index: seg.start + seg.len,
                size: rows,
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).as_slice().expect("standard layout"),
            self.value(k).as_slice().expect("standard layout"),
            self.value(v).as_slice().expect("standard layout"),
        );
        let total: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; rows * d];
        let mut off = 0;
        let mut scores = Vec::new();
        for seg in segments {
            let n = seg.len;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..n {
                    let qi = &qs[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &ks[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        scores.push(dot * scale);
                    }
                    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    let prow = &mut probs[off + i * n..off + i * n + n];
                    let orow = &mut out[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        prow[j] = p;
                        let vj = &vs[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
                off += n * n;
            }
        }
        let out = Array2::from_shape_vec((rows, d), out).expect("sized above");
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Reverse pass from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::InvalidArgument(format!(
                "backward needs a [1, 1] loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite {
                            op: "backward",
                            node: self.label(Var(idx)),
                        });
                    }
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *x, g);
                }
                Op::MulCol(x, col) => {
                    let xv = self.value(*x);
                    let gc = (&g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let gx = &g * self.value(*col);
                    acc(&mut grads, *col, gc);
                    acc(&mut grads, *x, gx);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g * *c),
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gi, &y| *gi *= y * (1.0 - y));
                    acc(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &xi| {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gi, &xi| {
                        let s = sigmoid(xi);
                        *gi *= s * (1.0 + xi * (1.0 - s));
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, &yi| *r -= yi * dot);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = g;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let total = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|r, &yi| *r -= yi.exp() * total);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    let w = g.ncols();
                    gx.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::Gather(table, idx) => {
                    let mut gt = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = gt.row_mut(i);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len() as f64;
                    let gx = Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]] / n);
                    acc(&mut grads, *x, gx);
                }
                Op::SqErr(a, b) => {
                    let diff = (self.value(*a) - self.value(*b)) * (2.0 * g[[0, 0]]);
                    acc(&mut grads, *b, -&diff);
                    acc(&mut grads, *a, diff);
                }
                Op::Cosine(a, b) => {
                    let (ga, gb) = cosine_backward(self.value(*a), self.value(*b), &node.value, &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Pick(x, idx) => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (i, &j) in idx.iter().enumerate() {
                        gx[[i, j]] += g[[i, 0]];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedSum(x, w) => {
                    let cols = self.value(*x).ncols();
                    let gx = Array2::from_shape_fn((w.len(), cols), |(i, _)| w[i] * g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut gx = &g * gam;
                    let n = gx.ncols() as f64;
                    for ((mut row, xh), &inv) in gx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
                        let mean_d = row.sum() / n;
                        let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        Zip::from(&mut row)
                            .and(&xh)
                            .for_each(|r, &h| *r = inv * (*r - mean_d - h * mean_dx));
                    }
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        segments,
                        *heads,
                        probs,
                        &g,
                    );
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => *t += &g,
        slot @ None => *slot = Some(g),
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    t.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn cosine_backward(a: &Tensor, b: &Tensor, c: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let na = row_norms(a);
    let nb = row_norms(b);
    let mut ah = a.clone();
    for (mut r, n) in ah.rows_mut().into_iter().zip(&na) {
        r /= *n;
    }
    let mut bh = b.clone();
    for (mut r, n) in bh.rows_mut().into_iter().zip(&nb) {
        r /= *n;
    }
    let gc = g * c;
    let row_dots = gc.sum_axis(Axis(1));
    let col_dots = gc.sum_axis(Axis(0));
    let mut ga = g.dot(&bh);
    for (i, mut r) in ga.rows_mut().into_iter().enumerate() {
        Zip::from(&mut r)
            .and(&ah.row(i))
            .for_each(|x, &h| *x = (*x - row_dots[i] * h) / na[i]);
    }
    let mut gb = g.t().dot(&ah);
    for (j, mut r) in gb.rows_mut().into_iter().enumerate() {
        Zip::from(&mut r)
            .and(&bh.row(j))
            .for_each(|x, &h| *x = (*x - col_dots[j] * h) / nb[j]);
    }
    (ga, gb)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    segments: &[Segment],
    heads: usize,
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [rows, d] = shape(q);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qs = q.as_slice().expect("standard layout");
    let ks = k.as_slice().expect("standard layout");
    let vs = v.as_slice().expect("standard layout");
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let mut gq = vec![0.0; rows * d];
    let mut gk = vec![0.0; rows * d];
    let mut gv = vec![0.0; rows * d];
    let mut dp = Vec::new();
    let mut off = 0;
    for seg in segments {
        let n = seg.len;
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..n {
                let ri = (seg.start + i) * d + c0;
                let go = &gs[ri..ri + dh];
                let prow = &probs[off + i * n..off + i * n + n];
                dp.clear();
                let mut dot = 0.0;
                for j in 0..=i {
                    let rj = (seg.start + j) * d + c0;
                    let vj = &vs[rj..rj + dh];
                    let val: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dp.push(val);
                    dot += prow[j] * val;
                    for (t, x) in gv[rj..rj + dh].iter_mut().zip(go) {
                        *t += prow[j] * x;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = (seg.start + j) * d + c0;
                    for c in 0..dh {
                        gq[ri + c] += ds * ks[rj + c];
                        gk[rj + c] += ds * qs[ri + c];
                    }
                }
            }
            off += n * n;
        }
    }
    let mk = |v| Array2::from_shape_vec((rows, d), v).expect("sized above");
    (mk(gq), mk(gk), mk(gv))
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// All bound parameters that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}
