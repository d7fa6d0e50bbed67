//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! information to run its backward rule. [`Tape::backward`] walks the nodes
//! in reverse, accumulating adjoints, and returns the gradients of every
//! parameter leaf keyed by parameter name.

use std::collections::HashMap;

use super::tensor::{matmul_into, matmul_t_into, t_matmul_into};
use super::{Gradients, ParamStore, Tensor2};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberately wrong backward behaviour, used as a negative control for
/// gradient checking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    /// Multiply every parameter gradient by this factor.
    ScaleParamGrads(f64),
    /// ReLU passes the upstream gradient through without masking.
    ReluPassThrough,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    BatchedMatMul { a: Var, b: Var, batches: usize },
    BatchedMatMulT { a: Var, b: Var, batches: usize },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    RowSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    BlockMeanRows { x: Var, block: usize },
    RowDot(Var, Var),
    Sum(Var),
    GruStep(Box<GruCache>),
    CrossEntropySum { logits: Var, targets: Vec<Option<usize>>, probs: Tensor2 },
}

#[derive(Clone, Debug)]
struct GruCache {
    gx: Var,
    row: usize,
    h: Var,
    w_hh: Var,
    b_hh: Var,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor2>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    param_names: Vec<Option<String>>,
    param_index: HashMap<String, Var>,
    spent: bool,
    fault: Option<BackwardFault>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0].data()[0]
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.param_names.push(None);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter leaf. Repeated calls with the same name return
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.param_names[v.0] = Some(name.to_string());
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            left: self.shape(a),
            right: self.shape(b),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul(&self.values[b.0])?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`, the row-vector form of applying a weight matrix `b`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.values[a.0].matmul_t(&self.values[b.0])?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    /// Splits `a` into `batches` row blocks of shape `m x k` and `b` into
    /// `batches` blocks of shape `k x n`, multiplying block-wise.
    pub fn batched_matmul(&mut self, a: Var, b: Var, batches: usize) -> Result<Var> {
        let (ar, k) = self.shape(a);
        let (br, n) = self.shape(b);
        if batches == 0 || ar % batches != 0 || br != batches * k {
            return Err(self.dim_err("batched_matmul", a, b));
        }
        let m = ar / batches;
        let mut out = Tensor2::zeros(ar, n);
        {
            let av = self.values[a.0].data();
            let bv = self.values[b.0].data();
            let od = out.data_mut();
            for t in 0..batches {
                matmul_into(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[t * k * n..(t + 1) * k * n],
                    &mut od[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::BatchedMatMul { a, b, batches }, ng))
    }

    /// Block-wise `a_t * b_t^T` with `a_t: m x k` and `b_t: n x k`.
    pub fn batched_matmul_t(&mut self, a: Var, b: Var, batches: usize) -> Result<Var> {
        let (ar, k) = self.shape(a);
        let (br, bk) = self.shape(b);
        if batches == 0 || ar % batches != 0 || br % batches != 0 || k != bk {
            return Err(self.dim_err("batched_matmul_t", a, b));
        }
        let m = ar / batches;
        let n = br / batches;
        let mut out = Tensor2::zeros(ar, n);
        {
            let av = self.values[a.0].data();
            let bv = self.values[b.0].data();
            let od = out.data_mut();
            for t in 0..batches {
                matmul_t_into(
                    &av[t * m * k..(t + 1) * m * k],
                    &bv[t * n * k..(t + 1) * n * k],
                    &mut od[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::BatchedMatMulT { a, b, batches }, ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(op, a, b));
        }
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor2::new(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if self.shape(row) != (1, ac) {
            return Err(self.dim_err("add_row", a, row));
        }
        let mut out = self.values[a.0].clone();
        let bias = self.values[row.0].data().to_vec();
        for r in 0..ar {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Scales row `i` of `a` by `col[i]`, where `col` is `rows x 1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ar, _) = self.shape(a);
        if self.shape(col) != (ar, 1) {
            return Err(self.dim_err("mul_col", a, col));
        }
        let mut out = self.values[a.0].clone();
        for r in 0..ar {
            let s = self.values[col.0].data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let ng = self.ng(a) || self.ng(col);
        Ok(self.push(out, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.values[a.0].map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        // NaN passes through so a poisoned input still reaches the loss.
        let out = self.values[a.0].map(|x| if x < 0.0 { 0.0 } else { x });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = self.values[a.0].row_softmax();
        let ng = self.ng(a);
        self.push(out, Op::RowSoftmax(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(self.dim_err("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.values[p.0].row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += self.shape(p).0;
            data.extend_from_slice(self.values[p.0].data());
        }
        let out = Tensor2::new(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: (rows, cols),
                right: (start, len),
            });
        }
        let src = &self.values[x.0];
        let out = Tensor2::from_fn(rows, len, |r, c| src.get(r, start + c));
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start + len > rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: (rows, cols),
                right: (start, len),
            });
        }
        let out = self.values[x.0].rows_range(start, len);
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    /// Mean of each consecutive group of `block` rows.
    pub fn block_mean_rows(&mut self, x: Var, block: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if block == 0 || rows % block != 0 {
            return Err(Error::Dimension {
                op: "block_mean_rows",
                left: (rows, cols),
                right: (block, cols),
            });
        }
        let groups = rows / block;
        let src = &self.values[x.0];
        let mut out = Tensor2::zeros(groups, cols);
        for g in 0..groups {
            for r in g * block..(g + 1) * block {
                for (o, v) in out.row_mut(g).iter_mut().zip(src.row(r)) {
                    *o += v;
                }
            }
            for o in out.row_mut(g) {
                *o /= block as f64;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::BlockMeanRows { x, block }, ng))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        self.block_mean_rows(x, rows)
    }

    /// Per-row dot product, giving a `rows x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("row_dot", a, b));
        }
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        let out = Tensor2::from_fn(av.rows(), 1, |r, _| {
            av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum()
        });
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::RowDot(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        let ng = self.ng(x);
        self.push(Tensor2::filled(1, 1, s), Op::Sum(x), ng)
    }

    /// Affine map `x * w^T + b` for a weight `w` stored as `out x in`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        self.add_row(y, b)
    }

    /// One gated recurrent step.
    ///
    /// `gx` holds precomputed input projections (`T x 3S`, gate order
    /// reset, update, candidate) and `row` selects the frame. `h` is the
    /// `1 x S` previous state; `w_hh` is `3S x S` and `b_hh` is `1 x 3S`.
    pub fn gru_step(&mut self, gx: Var, row: usize, h: Var, w_hh: Var, b_hh: Var) -> Result<Var> {
        let (hr, s) = self.shape(h);
        if hr != 1 || self.shape(w_hh) != (3 * s, s) || self.shape(b_hh) != (1, 3 * s) {
            return Err(self.dim_err("gru_step", h, w_hh));
        }
        let (gr, gc) = self.shape(gx);
        if gc != 3 * s || row >= gr {
            return Err(self.dim_err("gru_step", gx, h));
        }
        let hv = self.values[h.0].data();
        let mut gh = self.values[b_hh.0].data().to_vec();
        matmul_t_into(hv, self.values[w_hh.0].data(), &mut gh, 1, s, 3 * s);
        let x = self.values[gx.0].row(row);
        let mut r = vec![0.0; s];
        let mut z = vec![0.0; s];
        let mut n = vec![0.0; s];
        let hn = gh[2 * s..].to_vec();
        let mut out = vec![0.0; s];
        for i in 0..s {
            r[i] = sigmoid(x[i] + gh[i]);
            z[i] = sigmoid(x[s + i] + gh[s + i]);
            n[i] = (x[2 * s + i] + r[i] * hn[i]).tanh();
            out[i] = (1.0 - z[i]) * n[i] + z[i] * hv[i];
        }
        let ng = self.ng(gx) || self.ng(h) || self.ng(w_hh) || self.ng(b_hh);
        let cache = GruCache {
            gx,
            row,
            h,
            w_hh,
            b_hh,
            r,
            z,
            n,
            hn,
        };
        Ok(self.push(Tensor2::row_vector(out), Op::GruStep(Box::new(cache)), ng))
    }

    /// Summed softmax cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy_sum",
                left: (rows, cols),
                right: (targets.len(), 1),
            });
        }
        let probs = self.values[logits.0].row_softmax();
        let lv = &self.values[logits.0];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(c) = *t {
                if c >= cols {
                    return Err(Error::Contract(format!("target class {c} out of range {cols}")));
                }
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[c];
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor2::filled(1, 1, total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Runs the backward pass from a `1 x 1` root.
    ///
    /// A tape can be differentiated once; a second call fails with a state
    /// error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.spent {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(loss)
            )));
        }
        self.spent = true;
        let n = self.values.len();
        let mut grads: Vec<Option<Tensor2>> = vec![None; n];
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::default();
        for (i, name) in self.param_names.iter().enumerate() {
            if let Some(name) = name {
                let mut g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor2::zeros(self.values[i].rows(), self.values[i].cols()));
                if let Some(BackwardFault::ScaleParamGrads(s)) = self.fault {
                    g.scale_assign(s);
                }
                out.by_name.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let acc = |grads: &mut [Option<Tensor2>], v: Var, delta: Tensor2| {
            if !self.needs_grad[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(slot) => slot.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.values[v.0];

        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs_grad[a.0] {
                    acc(grads, *a, g.matmul_t(val(*b)).expect("shape"));
                }
                if self.needs_grad[b.0] {
                    acc(grads, *b, val(*a).t_matmul(g).expect("shape"));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                if self.needs_grad[a.0] {
                    acc(grads, *a, g.matmul(val(*b)).expect("shape"));
                }
                if self.needs_grad[b.0] {
                    acc(grads, *b, g.t_matmul(val(*a)).expect("shape"));
                }
            }
            Op::BatchedMatMul { a, b, batches } => {
                let (ar, k) = val(*a).shape();
                let n = val(*b).cols();
                let m = ar / batches;
                let mut da = Tensor2::zeros(ar, k);
                let mut db = Tensor2::zeros(val(*b).rows(), n);
                for t in 0..*batches {
                    let gs = &g.data()[t * m * n..(t + 1) * m * n];
                    let asl = &val(*a).data()[t * m * k..(t + 1) * m * k];
                    let bsl = &val(*b).data()[t * k * n..(t + 1) * k * n];
                    matmul_t_into(gs, bsl, &mut da.data_mut()[t * m * k..(t + 1) * m * k], m, n, k);
                    t_matmul_into(asl, gs, &mut db.data_mut()[t * k * n..(t + 1) * k * n], m, k, n);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::BatchedMatMulT { a, b, batches } => {
                let (ar, k) = val(*a).shape();
                let br = val(*b).rows();
                let m = ar / batches;
                let n = br / batches;
                let mut da = Tensor2::zeros(ar, k);
                let mut db = Tensor2::zeros(br, k);
                for t in 0..*batches {
                    let gs = &g.data()[t * m * n..(t + 1) * m * n];
                    let asl = &val(*a).data()[t * m * k..(t + 1) * m * k];
                    let bsl = &val(*b).data()[t * n * k..(t + 1) * n * k];
                    matmul_into(gs, bsl, &mut da.data_mut()[t * m * k..(t + 1) * m * k], m, n, k);
                    t_matmul_into(gs, asl, &mut db.data_mut()[t * n * k..(t + 1) * n * k], m, n, k);
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs_grad[a.0] {
                    acc(grads, *a, zip(g, val(*b), |x, y| x * y));
                }
                if self.needs_grad[b.0] {
                    acc(grads, *b, zip(g, val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone());
                if self.needs_grad[row.0] {
                    let mut db = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(grads, *row, db);
                }
            }
            Op::MulCol(a, col) => {
                let av = val(*a);
                let cv = val(*col);
                if self.needs_grad[a.0] {
                    let mut da = g.clone();
                    for r in 0..g.rows() {
                        let s = cv.data()[r];
                        for d in da.row_mut(r) {
                            *d *= s;
                        }
                    }
                    acc(grads, *a, da);
                }
                if self.needs_grad[col.0] {
                    let dc = Tensor2::from_fn(g.rows(), 1, |r, _| {
                        g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum()
                    });
                    acc(grads, *col, dc);
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::Relu(a) => {
                if self.fault == Some(BackwardFault::ReluPassThrough) {
                    acc(grads, *a, g.clone());
                } else {
                    acc(grads, *a, zip(g, val(*a), |d, x| if x > 0.0 { d } else { 0.0 }));
                }
            }
            Op::Sigmoid(a) => {
                let y = &self.values[i];
                acc(grads, *a, zip(g, y, |d, s| d * s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = &self.values[i];
                acc(grads, *a, zip(g, y, |d, t| d * (1.0 - t * t)));
            }
            Op::RowSoftmax(a) => {
                let y = &self.values[i];
                let mut da = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for (c, out) in da.row_mut(r).iter_mut().enumerate() {
                        *out = yr[c] * (gr[c] - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.needs_grad[p.0] {
                        let d = Tensor2::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                        acc(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if self.needs_grad[p.0] {
                        acc(grads, p, g.rows_range(offset, h));
                    }
                    offset += h;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = val(*x).shape();
                let mut d = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *x, d);
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = val(*x).shape();
                let mut d = Tensor2::zeros(rows, cols);
                d.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                acc(grads, *x, d);
            }
            Op::BlockMeanRows { x, block } => {
                let (rows, cols) = val(*x).shape();
                let inv = 1.0 / *block as f64;
                let d = Tensor2::from_fn(rows, cols, |r, c| g.get(r / block, c) * inv);
                acc(grads, *x, d);
            }
            Op::RowDot(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                if self.needs_grad[a.0] {
                    acc(grads, *a, Tensor2::from_fn(av.rows(), av.cols(), |r, c| g.get(r, 0) * bv.get(r, c)));
                }
                if self.needs_grad[b.0] {
                    acc(grads, *b, Tensor2::from_fn(bv.rows(), bv.cols(), |r, c| g.get(r, 0) * av.get(r, c)));
                }
            }
            Op::Sum(x) => {
                let (rows, cols) = val(*x).shape();
                acc(grads, *x, Tensor2::filled(rows, cols, g.data()[0]));
            }
            Op::GruStep(c) => self.gru_backward(c, g, grads, &acc),
            Op::CrossEntropySum { logits, targets, probs } => {
                let scale = g.data()[0];
                let mut d = Tensor2::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(c) = *t {
                        for (j, out) in d.row_mut(r).iter_mut().enumerate() {
                            let onehot = if j == c { 1.0 } else { 0.0 };
                            *out = scale * (probs.get(r, j) - onehot);
                        }
                    }
                }
                acc(grads, *logits, d);
            }
        }
    }

    fn gru_backward(
        &self,
        c: &GruCache,
        g: &Tensor2,
        grads: &mut [Option<Tensor2>],
        acc: &dyn Fn(&mut [Option<Tensor2>], Var, Tensor2),
    ) {
        let s = c.r.len();
        let hp = self.values[c.h.0].data();
        let dh = g.data();
        // d(pre-activation) for the input projection and the recurrent one.
        let mut dx = vec![0.0; 3 * s];
        let mut dgh = vec![0.0; 3 * s];
        let mut dhp = vec![0.0; s];
        for i in 0..s {
            let (r, z, n, hn) = (c.r[i], c.z[i], c.n[i], c.hn[i]);
            let dz = dh[i] * (hp[i] - n);
            let dn = dh[i] * (1.0 - z);
            dhp[i] += dh[i] * z;
            let dn_pre = dn * (1.0 - n * n);
            let dr = dn_pre * hn;
            let dz_pre = dz * z * (1.0 - z);
            let dr_pre = dr * r * (1.0 - r);
            dx[i] = dr_pre;
            dx[s + i] = dz_pre;
            dx[2 * s + i] = dn_pre;
            dgh[i] = dr_pre;
            dgh[s + i] = dz_pre;
            dgh[2 * s + i] = dn_pre * r;
        }
        if self.needs_grad[c.gx.0] {
            let (rows, cols) = self.values[c.gx.0].shape();
            let mut d = Tensor2::zeros(rows, cols);
            d.row_mut(c.row).copy_from_slice(&dx);
            acc(grads, c.gx, d);
        }
        if self.needs_grad[c.w_hh.0] {
            let mut dw = Tensor2::zeros(3 * s, s);
            t_matmul_into(&dgh, hp, dw.data_mut(), 1, 3 * s, s);
            acc(grads, c.w_hh, dw);
        }
        if self.needs_grad[c.b_hh.0] {
            acc(grads, c.b_hh, Tensor2::row_vector(dgh.clone()));
        }
        if self.needs_grad[c.h.0] {
            matmul_into(&dgh, self.values[c.w_hh.0].data(), &mut dhp, 1, 3 * s, s);
            acc(grads, c.h, Tensor2::row_vector(dhp));
        }
    }
}

fn zip(a: &Tensor2, b: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Tensor2 {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor2::new(a.rows(), a.cols(), data).expect("zip shapes agree")
}
