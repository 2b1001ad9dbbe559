//! Reverse-mode differentiation over a linear record of operations.
//!
//! Nodes are appended as operations execute, so index order is already a
//! topological order; backward walks it once in reverse.

use std::collections::BTreeMap;

use rand::Rng;

use super::kernels;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Normalize down each column.
    Rows,
    /// Normalize across each row.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Softmax(Var, Axis),
    Embedding(Var, Vec<usize>),
    Dropout(Var, Tensor),
    CrossEntropy(Var, usize),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Lstm(Box<LstmSaved>),
}

/// Forward quantities kept for backpropagation through time.
#[derive(Debug)]
struct LstmSaved {
    xw: Var,
    wh: Var,
    reverse: bool,
    mask: Option<Tensor>,
    /// Activated gates `[i | f | o | g]` per time step (input order).
    gates: Tensor,
    cells: Tensor,
    /// Recurrent input actually multiplied by `wh` at each step.
    h_in: Tensor,
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].as_ref()
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            params: vec![None; store.len()],
            leaves: BTreeMap::new(),
        }
    }

    /// Adds `scale * other` into `self` (parameter gradients only).
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            let Some(t) = theirs else { continue };
            let slot = mine.get_or_insert_with(|| Tensor::zeros(t.rows(), t.cols()));
            for (a, b) in slot.data_mut().iter_mut().zip(t.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Tensor::is_finite)
    }
}

/// Operation record for one forward pass over a borrowed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::var`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = ta.matmul(tb);
        Ok(self.push(out, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let out = ta.matmul_t(tb);
        Ok(self.push(out, Op::MatMulT(a, b), self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b), self.rg(&[a, b])))
    }

    /// Adds the `1 x c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(r));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % c];
        }
        Ok(self.push(out, Op::AddRow(a, r), self.rg(&[a, r])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(shape_err("concat_cols", self.value(parts[0]), self.value(*bad)));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let t = self.value(*p);
                out.data_mut()[r * cols + off..r * cols + off + t.cols()].copy_from_slice(t.row_slice(r));
                off += t.cols();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), self.rg(parts)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).cols() != cols) {
            return Err(shape_err("concat_rows", self.value(parts[0]), self.value(*bad)));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), self.rg(parts)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + width > ta.cols() {
            return Err(shape_err("slice_cols", ta, &Tensor::zeros(0, start + width)));
        }
        let mut out = Tensor::zeros(ta.rows(), width);
        for r in 0..ta.rows() {
            out.data_mut()[r * width..(r + 1) * width].copy_from_slice(&ta.row_slice(r)[start..start + width]);
        }
        Ok(self.push(out, Op::SliceCols(a, start), self.rg(&[a])))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + count > ta.rows() {
            return Err(shape_err("slice_rows", ta, &Tensor::zeros(start + count, 0)));
        }
        let c = ta.cols();
        let out = Tensor::from_vec(count, c, ta.data()[start * c..(start + count) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start), self.rg(&[a])))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let ta = self.value(a);
        let out = match axis {
            Axis::Cols => softmax_rows(ta),
            Axis::Rows => softmax_rows(&ta.transpose()).transpose(),
        };
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a, axis), rg)
    }

    /// Gathers rows of `table` (`vocab x dim`) for each index.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(format!(
                "embedding index {bad} outside table of {} rows",
                t.rows()
            )));
        }
        let d = t.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::from_vec(indices.len(), d, data)?;
        Ok(self.push(out, Op::Embedding(table, indices.to_vec()), self.rg(&[table])))
    }

    /// Inverted dropout with a fresh mask; identity when not training or at
    /// rate 0.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.value(a).shape();
        let mask = dropout_mask(r, c, rate, rng)?;
        self.apply_mask(a, &mask)
    }

    /// Multiplies by a precomputed dropout mask (shared across time steps by
    /// recurrent dropout).
    pub fn apply_mask(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != mask.shape() {
            return Err(shape_err("dropout", ta, mask));
        }
        let data = ta.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask.clone()), self.rg(&[a])))
    }

    /// Softmax cross-entropy of a `1 x k` logit row against class `label`
    /// (0-based).
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != 1 {
            return Err(shape_err("cross_entropy", t, &Tensor::zeros(1, t.cols())));
        }
        if label >= t.cols() {
            return Err(Error::InvalidArgument(format!("label {label} outside {} classes", t.cols())));
        }
        let z = t.data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = Tensor::scalar(lse - z[label]);
        Ok(self.push(out, Op::CrossEntropy(logits, label), self.rg(&[logits])))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Fused LSTM recurrence. `xw` (`T x 4H`) holds the input projections
    /// `x_t · W_x + b` with gate blocks `[i | f | o | g]`; `wh` is `H x 4H`.
    /// Steps run backwards in time when `reverse`; `mask` (`1 x H`) scales
    /// the recurrent input at every step. Returns `T x H` hidden states
    /// aligned with the rows of `xw`.
    pub fn lstm(&mut self, xw: Var, wh: Var, reverse: bool, mask: Option<&Tensor>) -> Result<Var> {
        let (txw, twh) = (self.value(xw), self.value(wh));
        let h = twh.rows();
        if twh.cols() != 4 * h || txw.cols() != 4 * h {
            return Err(shape_err("lstm", txw, twh));
        }
        if let Some(m) = mask {
            if m.shape() != (1, h) {
                return Err(shape_err("lstm mask", m, twh));
            }
        }
        let steps = txw.rows();
        if steps == 0 {
            return Err(Error::InvalidArgument("LSTM over an empty sequence".into()));
        }
        let mut gates = Tensor::zeros(steps, 4 * h);
        let mut cells = Tensor::zeros(steps, h);
        let mut h_in = Tensor::zeros(steps, h);
        let mut hs = Tensor::zeros(steps, h);
        let mut prev: Option<usize> = None;
        let mut z = vec![0.0; 4 * h];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            z.copy_from_slice(txw.row_slice(t));
            if let Some(p) = prev {
                let hin = &mut h_in.data_mut()[t * h..(t + 1) * h];
                hin.copy_from_slice(hs.row_slice(p));
                if let Some(m) = mask {
                    hin.iter_mut().zip(m.data()).for_each(|(v, m)| *v *= m);
                }
                kernels::matmul(hin, twh.data(), &mut z, 1, h, 4 * h);
            }
            let grow = &mut gates.data_mut()[t * 4 * h..(t + 1) * 4 * h];
            for (j, (gv, zv)) in grow.iter_mut().zip(&z).enumerate() {
                *gv = if j < 3 * h { sigmoid(*zv) } else { zv.tanh() };
            }
            for j in 0..h {
                let (i, f, o, g) = (grow[j], grow[h + j], grow[2 * h + j], grow[3 * h + j]);
                let c_prev = prev.map_or(0.0, |p| cells.data()[p * h + j]);
                let c = f * c_prev + i * g;
                cells.data_mut()[t * h + j] = c;
                hs.data_mut()[t * h + j] = o * c.tanh();
            }
            prev = Some(t);
        }
        let saved = LstmSaved {
            xw,
            wh,
            reverse,
            mask: mask.cloned(),
            gates,
            cells,
            h_in,
        };
        Ok(self.push(hs, Op::Lstm(Box::new(saved)), self.rg(&[xw, wh])))
    }

    /// Populates gradients of `loss` (a `1 x 1` node) with respect to every
    /// parameter and gradient-tracking leaf. A tape supports one backward
    /// pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::InvalidArgument("tape already consumed by backward".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = match &node.value {
                Value::Owned(t) => t,
                Value::Param(id) => self.params.get(*id),
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => match &mut out.params[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if self.tracks(*a) {
                        let ga = g.matmul_t(self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.tracks(*b) {
                        let gb = self.slot(&mut grads, *b);
                        self.value(*a).t_matmul_into(&g, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.tracks(*a) {
                        let ga = g.matmul(self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.tracks(*b) {
                        let gb = self.slot(&mut grads, *b);
                        g.t_matmul_into(self.value(*a), gb);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *b, g.clone());
                    self.acc(&mut grads, *a, g);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for row in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row_slice(row)) {
                            *o += v;
                        }
                    }
                    self.acc(&mut grads, *r, gr);
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip_map(&g, self.value(*b), |g, b| g * b);
                    let gb = zip_map(&g, self.value(*a), |g, a| g * a);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    self.acc(&mut grads, *a, g.map(|v| v * k));
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, y, |g, y| g * (1.0 - y * y));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, y, |g, y| g * y * (1.0 - y));
                    self.acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.tracks(*p) {
                            let mut gp = Tensor::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                gp.data_mut()[r * w..(r + 1) * w].copy_from_slice(&g.row_slice(r)[off..off + w]);
                            }
                            self.acc(&mut grads, *p, gp);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).rows();
                        if self.tracks(*p) {
                            let gp = Tensor::from_vec(h, c, g.data()[off * c..(off + h) * c].to_vec())?;
                            self.acc(&mut grads, *p, gp);
                        }
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    let (w, c) = (g.cols(), ta.cols());
                    for r in 0..g.rows() {
                        ga.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row_slice(r));
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    let c = ta.cols();
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    self.acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    self.acc(&mut grads, *a, g.transpose());
                }
                Op::Softmax(a, axis) => {
                    let ga = match axis {
                        Axis::Cols => softmax_backward_rows(y, &g),
                        Axis::Rows => softmax_backward_rows(&y.transpose(), &g.transpose()).transpose(),
                    };
                    self.acc(&mut grads, *a, ga);
                }
                Op::Embedding(table, indices) => {
                    if self.tracks(*table) {
                        let d = g.cols();
                        let gt = self.slot(&mut grads, *table);
                        for (r, &idx) in indices.iter().enumerate() {
                            for (o, v) in gt.data_mut()[idx * d..(idx + 1) * d].iter_mut().zip(g.row_slice(r)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    let ga = zip_map(&g, mask, |g, m| g * m);
                    self.acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(logits, label) => {
                    let p = softmax_rows(self.value(*logits));
                    let s = g.item();
                    let mut gl = p.map(|v| v * s);
                    gl.data_mut()[*label] -= s;
                    self.acc(&mut grads, *logits, gl);
                }
                Op::Sum(a) => {
                    let ta = self.value(*a);
                    let s = g.item();
                    self.acc(&mut grads, *a, ta.map(|_| s));
                }
                Op::Mean(a) => {
                    let ta = self.value(*a);
                    let s = g.item() / ta.len() as f64;
                    self.acc(&mut grads, *a, ta.map(|_| s));
                }
                Op::Lstm(sv) => {
                    let h = sv.cells.cols();
                    let steps = sv.cells.rows();
                    let twh = self.value(sv.wh);
                    let mut dxw = Tensor::zeros(steps, 4 * h);
                    let mut dh_next = vec![0.0; h];
                    let mut dc_next = vec![0.0; h];
                    let mut dz = vec![0.0; 4 * h];
                    for k in (0..steps).rev() {
                        let t = if sv.reverse { steps - 1 - k } else { k };
                        let p = (k > 0).then(|| if sv.reverse { steps - k } else { k - 1 });
                        let gr = sv.gates.row_slice(t);
                        for j in 0..h {
                            let (i, f, o, gg) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                            let c = sv.cells.data()[t * h + j];
                            let c_prev = p.map_or(0.0, |p| sv.cells.data()[p * h + j]);
                            let tc = c.tanh();
                            let dh = g.data()[t * h + j] + dh_next[j];
                            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                            dz[j] = dc * gg * i * (1.0 - i);
                            dz[h + j] = dc * c_prev * f * (1.0 - f);
                            dz[2 * h + j] = dh * tc * o * (1.0 - o);
                            dz[3 * h + j] = dc * i * (1.0 - gg * gg);
                            dc_next[j] = dc * f;
                        }
                        dxw.data_mut()[t * 4 * h..(t + 1) * 4 * h].copy_from_slice(&dz);
                        if p.is_some() {
                            kernels::matmul_t(&dz, twh.data(), &mut dh_next, 1, 4 * h, h);
                            if let Some(m) = &sv.mask {
                                dh_next.iter_mut().zip(m.data()).for_each(|(d, m)| *d *= m);
                            }
                        }
                    }
                    if self.tracks(sv.wh) {
                        let gwh = self.slot(&mut grads, sv.wh);
                        sv.h_in.t_matmul_into(&dxw, gwh);
                    }
                    self.acc(&mut grads, sv.xw, dxw);
                }
                Op::SumRows(a) => {
                    let ta = self.value(*a);
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    for r in 0..ta.rows() {
                        ga.data_mut()[r * ta.cols()..(r + 1) * ta.cols()].copy_from_slice(g.data());
                    }
                    self.acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(out)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The gradient accumulator for `v`, created as zeros on first use.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracks(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
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

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let c = t.cols();
    if c == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn softmax_backward_rows(y: &Tensor, g: &Tensor) -> Tensor {
    let c = y.cols();
    let mut out = Tensor::zeros(y.rows(), c);
    for r in 0..y.rows() {
        let (yr, gr) = (y.row_slice(r), g.row_slice(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (j, o) in out.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
            *o = yr[j] * (gr[j] - dot);
        }
    }
    out
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_vec(rows, cols, data)
}
