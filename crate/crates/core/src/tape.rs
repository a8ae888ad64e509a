//! Matrix-valued reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding its
//! value. [`Graph::backward`] walks the nodes in reverse creation order and
//! accumulates adjoints, so a node's gradient is complete once every later node
//! has been visited. Graphs are rebuilt for each forward pass.

use std::rc::Rc;

use crate::tensor::{log_sum_exp, Mat};

/// Floor applied before taking logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-38;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Row groups over a matrix, each paired with the column it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGroup {
    pub rows: Vec<usize>,
    pub class: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm(NodeId),
    Shift(NodeId, isize),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Log(NodeId),
    Pick(NodeId, Rc<Vec<usize>>),
    Mean(NodeId),
    Sum(NodeId),
    GatherRows(NodeId, Rc<Vec<usize>>),
    SliceRows(NodeId, usize),
    GroupMean(NodeId, Rc<Vec<RowGroup>>),
    GroupLogMeanExp(NodeId, Rc<Vec<RowGroup>>),
    AvgPoolRows(NodeId, usize),
    RowNormalize(NodeId),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of `shape` if it did not influence the output.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Mat {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat> {
        self.grads[id.0].take()
    }
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

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    /// Input or parameter. Constants are leaves whose gradient is ignored.
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Mat::from_vec(x.rows(), x.cols(), data);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the `1 x C` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let row = self.value(b);
        assert_eq!(row.rows(), 1, "add_row expects a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), row.cols(), "add_row width mismatch");
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(row.row(0)) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1 x C` row `b`.
    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let row = self.value(b);
        assert_eq!(row.rows(), 1, "mul_row expects a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), row.cols(), "mul_row width mismatch");
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(row.row(0)) {
                *x *= y;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| {
            let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * x * (1.0 + th)
        });
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..x.rows() {
            let row = v.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for y in row.iter_mut() {
                *y = (*y - mean) * inv;
            }
        }
        self.push(v, Op::LayerNorm(a))
    }

    /// `out[t] = a[t + offset]`, zero outside the sequence.
    pub fn shift_rows(&mut self, a: NodeId, offset: isize) -> NodeId {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows(), x.cols());
        for t in 0..x.rows() {
            let src = t as isize + offset;
            if src >= 0 && (src as usize) < x.rows() {
                v.row_mut(t).copy_from_slice(x.row(src as usize));
            }
        }
        self.push(v, Op::Shift(a, offset))
    }

    /// Row-wise softmax. Entries where `mask` is false get probability zero;
    /// every row must keep at least one entry.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&[bool]>) -> NodeId {
        let x = self.value(a);
        let mut v = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let allowed = |c: usize| mask.is_none_or(|m| m[r * x.cols() + c]);
            let m = (0..x.cols())
                .filter(|&c| allowed(c))
                .map(|c| x[(r, c)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..x.cols() {
                if allowed(c) {
                    let e = (x[(r, c)] - m).exp();
                    v[(r, c)] = e;
                    z += e;
                }
            }
            for y in v.row_mut(r) {
                *y /= z;
            }
        }
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = crate::tensor::log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    /// Natural log with inputs floored at [`PROB_FLOOR`].
    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(PROB_FLOOR).ln());
        self.push(v, Op::Log(a))
    }

    /// Column vector with `out[r] = a[r, idx[r]]`.
    pub fn pick(&mut self, a: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let x = self.value(a);
        assert_eq!(idx.len(), x.rows(), "pick needs one index per row");
        let data = idx.iter().enumerate().map(|(r, &c)| x[(r, c)]).collect();
        let v = Mat::from_vec(x.rows(), 1, data);
        self.push(v, Op::Pick(a, idx))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Mat::filled(1, 1, x.sum() / x.data().len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Mat::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Rows of `table` selected by `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let x = self.value(table);
        let mut v = Mat::zeros(idx.len(), x.cols());
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(v, Op::GatherRows(table, idx))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice out of range");
        let v = Mat::from_vec(
            len,
            x.cols(),
            x.data()[start * x.cols()..(start + len) * x.cols()].to_vec(),
        );
        self.push(v, Op::SliceRows(a, start))
    }

    /// `G x C` matrix of per-group row means.
    pub fn group_mean_rows(&mut self, a: NodeId, groups: Rc<Vec<RowGroup>>) -> NodeId {
        let x = self.value(a);
        let mut v = Mat::zeros(groups.len(), x.cols());
        for (g, grp) in groups.iter().enumerate() {
            let inv = 1.0 / grp.rows.len() as f64;
            for &r in &grp.rows {
                for (o, y) in v.row_mut(g).iter_mut().zip(x.row(r)) {
                    *o += y * inv;
                }
            }
        }
        self.push(v, Op::GroupMean(a, groups))
    }

    /// `G x 1` column: for each group, `log(mean_r exp(a[r, class]))`.
    /// Applied to log-probabilities this is the log of the mean probability,
    /// computed without leaving the log domain.
    pub fn group_log_mean_exp(&mut self, a: NodeId, groups: Rc<Vec<RowGroup>>) -> NodeId {
        let x = self.value(a);
        let data = groups
            .iter()
            .map(|grp| {
                let vals: Vec<f64> = grp.rows.iter().map(|&r| x[(r, grp.class)]).collect();
                log_sum_exp(&vals) - (vals.len() as f64).ln()
            })
            .collect();
        let v = Mat::from_vec(groups.len(), 1, data);
        self.push(v, Op::GroupLogMeanExp(a, groups))
    }

    /// Average pooling along rows with an odd window, counting only rows inside
    /// the sequence.
    pub fn avg_pool_rows(&mut self, a: NodeId, kernel: usize) -> NodeId {
        let x = self.value(a);
        let half = kernel / 2;
        let mut v = Mat::zeros(x.rows(), x.cols());
        for t in 0..x.rows() {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(x.rows() - 1);
            let inv = 1.0 / (hi - lo + 1) as f64;
            for s in lo..=hi {
                for (o, y) in v.row_mut(t).iter_mut().zip(x.row(s)) {
                    *o += y * inv;
                }
            }
        }
        self.push(v, Op::AvgPoolRows(a, kernel))
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let s: f64 = v.row(r).iter().sum();
            for y in v.row_mut(r) {
                *y /= s;
            }
        }
        self.push(v, Op::RowNormalize(a))
    }

    /// Reverse pass from the scalar node `out`.
    pub fn backward(&self, out: NodeId) -> Gradients {
        assert_eq!(
            self.value(out).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, dy: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, dy.matmul_t(val(*b)));
                accumulate(grads, *b, val(*a).t_matmul(dy));
            }
            Op::MatMulT(a, b) => {
                accumulate(grads, *a, dy.matmul(val(*b)));
                accumulate(grads, *b, dy.t_matmul(val(*a)));
            }
            Op::Transpose(a) => accumulate(grads, *a, dy.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.clone());
                accumulate(grads, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, hadamard(dy, val(*b)));
                accumulate(grads, *b, hadamard(dy, val(*a)));
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, dy.clone());
                let s = dy.col_sums();
                accumulate(grads, *b, Mat::from_vec(1, s.len(), s));
            }
            Op::MulRow(a, b) => {
                let row = val(*b);
                let x = val(*a);
                let mut da = dy.clone();
                let mut db = vec![0.0; row.cols()];
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        da[(r, c)] = dy[(r, c)] * row[(0, c)];
                        db[c] += dy[(r, c)] * x[(r, c)];
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, Mat::from_vec(1, db.len(), db));
            }
            Op::Scale(a, s) => accumulate(grads, *a, dy.map(|g| g * s)),
            Op::Gelu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &g)| {
                        let inner = GELU_C * (x + GELU_A * x * x * x);
                        let th = inner.tanh();
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * d
                    })
                    .collect();
                accumulate(grads, *a, Mat::from_vec(x.rows(), x.cols(), data));
            }
            Op::Sigmoid(a) => {
                let data = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                accumulate(grads, *a, Mat::from_vec(y.rows(), y.cols(), data));
            }
            Op::LayerNorm(a) => {
                let x = val(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let n = xr.len() as f64;
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let yr = y.row(r);
                    let gr = dy.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Shift(a, offset) => {
                let mut dx = Mat::zeros(dy.rows(), dy.cols());
                for t in 0..dy.rows() {
                    let src = t as isize + offset;
                    if src >= 0 && (src as usize) < dy.rows() {
                        let src = src as usize;
                        for (o, g) in dx.row_mut(src).iter_mut().zip(dy.row(t)) {
                            *o += g;
                        }
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Softmax(a) => {
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s: f64 = y.row(r).iter().zip(dy.row(r)).map(|(p, g)| p * g).sum();
                    for c in 0..y.cols() {
                        dx[(r, c)] = y[(r, c)] * (dy[(r, c)] - s);
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LogSoftmax(a) => {
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s: f64 = dy.row(r).iter().sum();
                    for c in 0..y.cols() {
                        dx[(r, c)] = dy[(r, c)] - y[(r, c)].exp() * s;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Log(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &g)| if x > PROB_FLOOR { g / x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, Mat::from_vec(x.rows(), x.cols(), data));
            }
            Op::Pick(a, idx) => {
                let x = val(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for (r, &c) in idx.iter().enumerate() {
                    dx[(r, c)] = dy[(r, 0)];
                }
                accumulate(grads, *a, dx);
            }
            Op::Mean(a) => {
                let x = val(*a);
                let g = dy[(0, 0)] / x.data().len() as f64;
                accumulate(grads, *a, Mat::filled(x.rows(), x.cols(), g));
            }
            Op::Sum(a) => {
                let x = val(*a);
                accumulate(grads, *a, Mat::filled(x.rows(), x.cols(), dy[(0, 0)]));
            }
            Op::GatherRows(table, idx) => {
                let x = val(*table);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, g) in dx.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                accumulate(grads, *table, dx);
            }
            Op::SliceRows(a, start) => {
                let x = val(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for r in 0..dy.rows() {
                    dx.row_mut(start + r).copy_from_slice(dy.row(r));
                }
                accumulate(grads, *a, dx);
            }
            Op::GroupMean(a, groups) => {
                let x = val(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for (g, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.rows.len() as f64;
                    for &r in &grp.rows {
                        for (o, d) in dx.row_mut(r).iter_mut().zip(dy.row(g)) {
                            *o += d * inv;
                        }
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::GroupLogMeanExp(a, groups) => {
                let x = val(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for (g, grp) in groups.iter().enumerate() {
                    let lse = y[(g, 0)] + (grp.rows.len() as f64).ln();
                    for &r in &grp.rows {
                        let w = (x[(r, grp.class)] - lse).exp();
                        dx[(r, grp.class)] += dy[(g, 0)] * w;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::AvgPoolRows(a, kernel) => {
                let half = kernel / 2;
                let n = dy.rows();
                let mut dx = Mat::zeros(n, dy.cols());
                for t in 0..n {
                    let lo = t.saturating_sub(half);
                    let hi = (t + half).min(n - 1);
                    let inv = 1.0 / (hi - lo + 1) as f64;
                    for s in lo..=hi {
                        for (o, g) in dx.row_mut(s).iter_mut().zip(dy.row(t)) {
                            *o += g * inv;
                        }
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let mut dx = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let s: f64 = x.row(r).iter().sum();
                    let gy: f64 = dy.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                    for c in 0..x.cols() {
                        dx[(r, c)] = (dy[(r, c)] - gy) / s;
                    }
                }
                accumulate(grads, *a, dx);
            }
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

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.rows(), a.cols(), data)
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
