//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node to the tape. A single
//! call to [`Tape::backward`] walks the list in reverse and returns the
//! gradient of a scalar node with respect to every node. Gradients of a node
//! used several times are summed in reverse tape order, so results are
//! deterministic for a given sequence of operations.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    RowDot(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    SparseCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, expected: &[usize], found: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
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

    /// True once [`backward`](Self::backward) has run on this tape.
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input or parameter. Gradients are reported for leaves too.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        self.push(v, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    /// Matrix product of `(m,k)` and `(k,n)` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x[i, j] + b[j]` for `x: (n, f)` and `b: (f)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let f = tb.len();
        if tx.shape().len() != 2 || tx.shape()[1] != f {
            return Err(shape_err("add_bias", &[tx.rows(), f], tx.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Row-wise softmax of a `(n, c)` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(shape_err("softmax", &[t.rows(), t.row_len()], t.shape()));
        }
        let c = t.shape()[1];
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Collapse all trailing axes: `(n, ...) -> (n, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(x, shape)
    }

    /// Columns `start..start+len` of a `(n, f)` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || start + len > t.shape()[1] || len == 0 {
            return Err(shape_err("slice_cols", &[t.rows(), start + len], t.shape()));
        }
        let f = t.shape()[1];
        let mut data = Vec::with_capacity(t.rows() * len);
        for row in t.data().chunks(f) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::new(vec![t.rows(), len], data)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    /// Select leading-axis rows; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows needs indices".into()));
        }
        let v = t.gather_rows(idx);
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sum over all trailing axes, giving shape `(n)`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = t.row_len();
        let data: Vec<f64> = t.data().chunks(w).map(|r| r.iter().sum()).collect();
        let n = data.len();
        self.push(Tensor::new(vec![n], data).expect("row sums"), Op::SumRows(x))
    }

    /// Per-row dot product of two equally shaped operands, giving shape `(n)`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let w = ta.row_len();
        let data: Vec<f64> = ta
            .data()
            .chunks(w)
            .zip(tb.data().chunks(w))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let n = data.len();
        Ok(self.push(Tensor::new(vec![n], data)?, Op::RowDot(a, b)))
    }

    /// Stride-1 2D convolution (cross-correlation) with zero padding `pad`.
    ///
    /// `x: (n, c, h, w)`, `w: (o, c, k, k)`, `b: (o)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err("conv2d", ws, xs));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if tb.len() != o || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err("conv2d", &[o, c, k, k], xs));
        }
        let geo = ConvGeom {
            c,
            h,
            w: wd,
            k,
            pad,
            ho: h + 2 * pad - k + 1,
            wo: wd + 2 * pad - k + 1,
        };
        let plane = geo.ho * geo.wo;
        let mut out = vec![0.0; n * o * plane];
        let ckk = c * k * k;
        for i in 0..n {
            let cols = geo.im2col(&tx.data()[i * c * h * wd..(i + 1) * c * h * wd]);
            let y = matmul(tw.data(), &cols, o, ckk, plane);
            let dst = &mut out[i * o * plane..(i + 1) * o * plane];
            for (ch, (drow, yrow)) in dst.chunks_mut(plane).zip(y.chunks(plane)).enumerate() {
                let bv = tb.data()[ch];
                for (d, &yv) in drow.iter_mut().zip(yrow) {
                    *d = yv + bv;
                }
            }
        }
        let v = Tensor::new(vec![n, o, geo.ho, geo.wo], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, pad }))
    }

    /// 2x2 max pooling with stride 2 over `(n, c, h, w)`; odd edges are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool2", &[t.rows(), 1, 2, 2], s));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let d = t.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(v, Op::MaxPool2 { x, argmax }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, fused through
    /// log-sum-exp.
    pub fn sparse_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.rows() != labels.len() {
            return Err(shape_err("sparse_cross_entropy", &[labels.len(), t.row_len()], t.shape()));
        }
        let c = t.shape()[1];
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: c,
            });
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SparseCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from scalar `loss`. Consumes the tape: a second call
    /// without recording a fresh tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", &[1], self.value(loss).shape()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let da = matmul_nt(g.data(), tb.data(), m, n, k);
                let db = matmul_tn(ta.data(), g.data(), m, k, n);
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::AddBias(x, b) => {
                let f = val(*b).len();
                let mut db = vec![0.0; f];
                for row in g.data().chunks(f) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                accumulate(grads, *x, g.shape(), g.data().to_vec());
                accumulate(grads, *b, val(*b).shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                accumulate(grads, *a, g.shape(), g.zip_map(tb, |gv, y| gv * y).into_data());
                accumulate(grads, *b, g.shape(), g.zip_map(ta, |gv, x| gv * x).into_data());
            }
            Op::Div(a, b) => {
                let tb = val(*b);
                accumulate(grads, *a, g.shape(), g.zip_map(tb, |gv, y| gv / y).into_data());
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(tb.data())
                    .map(|((&gv, &q), &y)| -gv * q / y)
                    .collect();
                accumulate(grads, *b, g.shape(), db);
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.shape(), g.data().iter().map(|v| v * c).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                accumulate(grads, *x, val(*x).shape(), g.data().to_vec());
            }
            Op::Relu(x) => {
                let d = g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, *x, g.shape(), d.into_data());
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(out, |gv, y| gv * y * (1.0 - y));
                accumulate(grads, *x, g.shape(), d.into_data());
            }
            Op::Tanh(x) => {
                let d = g.zip_map(out, |gv, y| gv * (1.0 - y * y));
                accumulate(grads, *x, g.shape(), d.into_data());
            }
            Op::Exp(x) => {
                let d = g.zip_map(out, |gv, y| gv * y);
                accumulate(grads, *x, g.shape(), d.into_data());
            }
            Op::Log(x) => {
                let d = g.zip_map(val(*x), |gv, xv| gv / xv);
                accumulate(grads, *x, g.shape(), d.into_data());
            }
            Op::Softplus(x) => {
                let d = g.zip_map(val(*x), |gv, xv| gv * stable_sigmoid(xv));
                accumulate(grads, *x, g.shape(), d.into_data());
            }
            Op::Square(x) => {
                let d = g.zip_map(val(*x), |gv, xv| 2.0 * gv * xv);
                accumulate(grads, *x, g.shape(), d.into_data());
            }
            Op::Sqrt(x) => {
                let d = g.zip_map(out, |gv, y| gv * 0.5 / y);
                accumulate(grads, *x, g.shape(), d.into_data());
            }
            Op::Softmax(x) => {
                let c = out.shape()[1];
                let mut d = Vec::with_capacity(out.len());
                for (yrow, grow) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                    d.extend(yrow.iter().zip(grow).map(|(y, gv)| y * (gv - dot)));
                }
                accumulate(grads, *x, out.shape(), d);
            }
            Op::SliceCols { x, start } => {
                let src = val(*x);
                let f = src.shape()[1];
                let len = out.shape()[1];
                let mut d = vec![0.0; src.len()];
                for (drow, grow) in d.chunks_mut(f).zip(g.data().chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                accumulate(grads, *x, src.shape(), d);
            }
            Op::GatherRows { x, idx } => {
                let src = val(*x);
                let w = src.row_len();
                let mut d = vec![0.0; src.len()];
                for (grow, &r) in g.data().chunks(w).zip(idx) {
                    for (dv, &gv) in d[r * w..(r + 1) * w].iter_mut().zip(grow) {
                        *dv += gv;
                    }
                }
                accumulate(grads, *x, src.shape(), d);
            }
            Op::Sum(x) => {
                let src = val(*x);
                accumulate(grads, *x, src.shape(), vec![g.data()[0]; src.len()]);
            }
            Op::Mean(x) => {
                let src = val(*x);
                let gv = g.data()[0] / src.len() as f64;
                accumulate(grads, *x, src.shape(), vec![gv; src.len()]);
            }
            Op::SumRows(x) => {
                let src = val(*x);
                let w = src.row_len();
                let mut d = Vec::with_capacity(src.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv, w));
                }
                accumulate(grads, *x, src.shape(), d);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let w = ta.row_len();
                let mut da = Vec::with_capacity(ta.len());
                let mut db = Vec::with_capacity(tb.len());
                for ((ra, rb), &gv) in ta.data().chunks(w).zip(tb.data().chunks(w)).zip(g.data()) {
                    da.extend(rb.iter().map(|v| v * gv));
                    db.extend(ra.iter().map(|v| v * gv));
                }
                accumulate(grads, *a, ta.shape(), da);
                accumulate(grads, *b, tb.shape(), db);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (tx, tw) = (val(*x), val(*w));
                let (xs, ws) = (tx.shape(), tw.shape());
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let geo = ConvGeom {
                    c,
                    h,
                    w: wd,
                    k,
                    pad: *pad,
                    ho: out.shape()[2],
                    wo: out.shape()[3],
                };
                let plane = geo.ho * geo.wo;
                let ckk = c * k * k;
                let mut dw = vec![0.0; tw.len()];
                let mut db = vec![0.0; o];
                let mut dx = vec![0.0; tx.len()];
                for i in 0..n {
                    let gi = &g.data()[i * o * plane..(i + 1) * o * plane];
                    for (ch, grow) in gi.chunks(plane).enumerate() {
                        db[ch] += grow.iter().sum::<f64>();
                    }
                    let cols = geo.im2col(&tx.data()[i * c * h * wd..(i + 1) * c * h * wd]);
                    let dwi = matmul_nt(gi, &cols, o, plane, ckk);
                    for (a, bv) in dw.iter_mut().zip(dwi) {
                        *a += bv;
                    }
                    let dcols = matmul_tn(tw.data(), gi, o, ckk, plane);
                    geo.col2im_add(&dcols, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
                }
                accumulate(grads, *x, xs, dx);
                accumulate(grads, *w, ws, dw);
                accumulate(grads, *b, &[o], db);
            }
            Op::MaxPool2 { x, argmax } => {
                let src = val(*x);
                let mut d = vec![0.0; src.len()];
                for (&gv, &j) in g.data().iter().zip(argmax) {
                    d[j] += gv;
                }
                accumulate(grads, *x, src.shape(), d);
            }
            Op::SparseCe {
                logits,
                labels,
                probs,
            } => {
                let src = val(*logits);
                let c = src.shape()[1];
                let scale = g.data()[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                accumulate(grads, *logits, src.shape(), d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape"));
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// `(c*k*k, ho*wo)` patch matrix for one image.
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let plane = self.ho * self.wo;
        let mut cols = vec![0.0; self.c * self.k * self.k * plane];
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ch * self.k + ky) * self.k + kx;
                    let dst = &mut cols[r * plane..(r + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = oy + ky;
                        if iy < self.pad || iy - self.pad >= self.h {
                            continue;
                        }
                        let iy = iy - self.pad;
                        for ox in 0..self.wo {
                            let ix = ox + kx;
                            if ix < self.pad || ix - self.pad >= self.w {
                                continue;
                            }
                            dst[oy * self.wo + ox] = img[(ch * self.h + iy) * self.w + ix - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add(&self, cols: &[f64], img: &mut [f64]) {
        let plane = self.ho * self.wo;
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ch * self.k + ky) * self.k + kx;
                    let src = &cols[r * plane..(r + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = oy + ky;
                        if iy < self.pad || iy - self.pad >= self.h {
                            continue;
                        }
                        let iy = iy - self.pad;
                        for ox in 0..self.wo {
                            let ix = ox + kx;
                            if ix < self.pad || ix - self.pad >= self.w {
                                continue;
                            }
                            img[(ch * self.h + iy) * self.w + ix - self.pad] += src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn square_gradient_is_2w() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let l = tape.square(w);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(1.0));
        let l = tape.square(w);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &[0.3; 4]));
        let l = tape.sparse_cross_entropy(x, &[2]).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);

        let x = tape.leaf(t(&[1, 2], &[2.0, 0.0]));
        let l = tape.sparse_cross_entropy(x, &[0]).unwrap();
        let e2 = 2f64.exp();
        assert!((tape.scalar(l) + (e2 / (e2 + 1.0)).ln()).abs() < 1e-12);
        assert!((tape.scalar(l) - 0.1269).abs() < 1e-4);

        let x = tape.leaf(t(&[1, 3], &[800.0, 0.0, 0.0]));
        let l = tape.sparse_cross_entropy(x, &[0]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let err = tape.sparse_cross_entropy(x, &[1, 3]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { index: 1, label: 3, classes: 3 }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0]));
        let y = tape.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel of weight 1 reproduces the input.
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.leaf(t(&[1, 1, 4, 4], &data));
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_same_padding_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 8, 8], 1.0));
        let w = tape.leaf(Tensor::full(&[4, 3, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 8, 8]);
        // interior sees all 27 taps, a corner sees 12
        let v = tape.value(y).data();
        assert_eq!(v[9], 27.0);
        assert_eq!(v[0], 12.0);
    }

    #[test]
    fn max_pool_picks_max() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    }
}
