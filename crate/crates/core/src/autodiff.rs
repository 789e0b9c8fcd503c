//! Reverse-mode automatic differentiation over rank-2 `f64` tensors.
//!
//! A [`Tape`] records every primitive in execution order; [`Tape::backward`]
//! replays it in reverse. Broadcasting is limited to row-vector bias
//! addition ([`Tape::add_row`]) and per-row scaling ([`Tape::scale_rows`]).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::{CsrMatrix, Matrix};

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Hadamard(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    ReduceMean(Var),
    ReduceSum(Var),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    Column(Var, usize),
    SegmentSoftmax(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    PairwiseSqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when it received none.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push_raw(m, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push_raw(m, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name.to_string() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn spmm(&mut self, s: Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let v = s.spmm(self.value(x))?;
        self.push("spmm", v, Op::SpMM(s, x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    /// `a + 1 * bias` with `bias` a 1 x cols row vector.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            return Err(shape_err("add_row", format!("{:?} + {:?}", (r, c), self.shape(bias))));
        }
        let b = self.value(bias).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..r {
            for (x, y) in v.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push("add_row", v, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("hadamard", v, Op::Hadamard(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push("abs", v, Op::Abs(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push("row_softmax", v, Op::RowSoftmax(a), &[a])
    }

    /// Log-softmax per row, computed stably.
    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push("row_log_softmax", v, Op::RowLogSoftmax(a), &[a])
    }

    /// Stacks `b` below `a`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(shape_err("concat_rows", format!("{:?} over {:?}", (ra, ca), (rb, cb))));
        }
        let mut data = self.value(a).as_slice().to_vec();
        data.extend_from_slice(self.value(b).as_slice());
        let v = Matrix::from_vec(ra + rb, ca, data)?;
        self.push("concat_rows", v, Op::ConcatRows(a, b), &[a, b])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(shape_err("concat_cols", format!("{:?} | {:?}", (ra, ca), (rb, cb))));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let v = Matrix::from_fn(ra, ca + cb, |i, j| if j < ca { va.get(i, j) } else { vb.get(i, j - ca) });
        self.push("concat_cols", v, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(shape_err("reduce_mean", "empty tensor".into()));
        }
        let v = Matrix::scalar(m.sum() / m.len() as f64);
        self.push("reduce_mean", v, Op::ReduceMean(a), &[a])
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var> {
        let v = Matrix::scalar(self.value(a).sum());
        self.push("reduce_sum", v, Op::ReduceSum(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} of {rows}")));
        }
        let v = self.value(a).gather_rows(&idx);
        self.push("gather_rows", v, Op::GatherRows(a, idx), &[a])
    }

    /// Multiplies row `i` of `x` by the scalar `w[i, 0]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, _) = self.shape(x);
        if self.shape(w) != (r, 1) {
            return Err(shape_err("scale_rows", format!("{:?} by {:?}", self.shape(x), self.shape(w))));
        }
        let mut v = self.value(x).clone();
        for i in 0..r {
            let s = self.value(w).get(i, 0);
            v.row_mut(i).iter_mut().for_each(|e| *e *= s);
        }
        self.push("scale_rows", v, Op::ScaleRows(x, w), &[x, w])
    }

    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if j >= c {
            return Err(shape_err("column", format!("column {j} of {c}")));
        }
        let m = self.value(x);
        let v = Matrix::from_fn(r, 1, |i, _| m.get(i, j));
        self.push("column", v, Op::Column(x, j), &[x])
    }

    /// Softmax of a column vector within contiguous segments. `offsets` has
    /// one more entry than there are segments; segment `s` covers rows
    /// `offsets[s]..offsets[s+1]`.
    pub fn segment_softmax(&mut self, scores: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.shape(scores);
        if c != 1 || offsets.first() != Some(&0) || offsets.last() != Some(&r) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(shape_err("segment_softmax", format!("{:?} with {} offsets", (r, c), offsets.len())));
        }
        let mut v = self.value(scores).clone();
        for w in offsets.windows(2) {
            softmax_in_place(&mut v.as_mut_slice()[w[0]..w[1]]);
        }
        self.push("segment_softmax", v, Op::SegmentSoftmax(scores, offsets), &[scores])
    }

    /// `out[dst[e]] += x[e]` over rows, producing `n` output rows.
    pub fn scatter_add_rows(&mut self, x: Var, dst: Arc<Vec<usize>>, n: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if dst.len() != r || dst.iter().any(|&d| d >= n) {
            return Err(shape_err("scatter_add_rows", format!("{r} rows into {n}")));
        }
        let mut v = Matrix::zeros(n, c);
        let m = self.value(x);
        for (e, &d) in dst.iter().enumerate() {
            for (o, &a) in v.row_mut(d).iter_mut().zip(m.row(e)) {
                *o += a;
            }
        }
        // gradient w.r.t. x only needs dst; n is recovered from the output shape
        self.push("scatter_add_rows", v, Op::ScatterAddRows(x, dst), &[x])
    }

    /// Squared Euclidean distances between the rows of `x` and `y`.
    pub fn pairwise_sq_dist(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        if a.cols() != b.cols() {
            return Err(shape_err("pairwise_sq_dist", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let v = Matrix::from_fn(a.rows(), b.rows(), |i, j| {
            a.row(i).iter().zip(b.row(j)).map(|(p, q)| (p - q) * (p - q)).sum()
        });
        self.push("pairwise_sq_dist", v, Op::PairwiseSqDist(x, y), &[x, y])
    }

    /// Sum of several same-shaped values.
    pub fn sum_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::input("sum of no tensors"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Smallest |input| over every differentiable relu, leaky_relu or abs
    /// recorded so far; infinity when there is none. Central differences
    /// with step `h` are only meaningful when this exceeds `h`.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) | Op::Abs(a) if self.nodes[a.0].needs_grad => Some(a),
                _ => None,
            })
            .flat_map(|a| self.value(a).as_slice().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass from a 1x1 output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::input(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(val(*b)));
                acc(*b, val(*a).t_matmul(g));
            }
            Op::SpMM(s, x) => acc(*x, s.t_spmm(g)),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut col_sums = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (s, x) in col_sums.as_mut_slice().iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                acc(*bias, col_sums);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Hadamard(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::LeakyRelu(a, slope) => {
                acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { slope * d }))
            }
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |d, x| d / x)),
            Op::Abs(a) => acc(*a, g.zip_map(val(*a), |d, x| d * x.signum() * f64::from(x != 0.0))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    softmax_backward(y.row(i), g.row(i), dx.row_mut(i));
                }
                acc(*a, dx);
            }
            Op::RowLogSoftmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for ((d, &gi), &yi) in dx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *d = gi - yi.exp() * total;
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatRows(a, b) => {
                let ra = val(*a).rows();
                let rb = val(*b).rows();
                acc(*a, g.gather_rows(&(0..ra).collect::<Vec<_>>()));
                acc(*b, g.gather_rows(&(ra..ra + rb).collect::<Vec<_>>()));
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                acc(*a, Matrix::from_fn(g.rows(), ca, |i, j| g.get(i, j)));
                acc(*b, Matrix::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j)));
            }
            Op::ReduceMean(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
            }
            Op::ReduceSum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &d) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += d;
                    }
                }
                acc(*a, dx);
            }
            Op::ScaleRows(x, w) => {
                let xv = val(*x);
                let wv = val(*w);
                let mut dx = g.clone();
                let mut dw = Matrix::zeros(wv.rows(), 1);
                for i in 0..xv.rows() {
                    let s = wv.get(i, 0);
                    dx.row_mut(i).iter_mut().for_each(|e| *e *= s);
                    dw.set(i, 0, crate::matrix::dot(g.row(i), xv.row(i)));
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::Column(x, j) => {
                let (r, c) = val(*x).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    dx.set(i, *j, g.get(i, 0));
                }
                acc(*x, dx);
            }
            Op::SegmentSoftmax(s, offsets) => {
                let y = node.value.as_slice();
                let mut dx = Matrix::zeros(y.len(), 1);
                for w in offsets.windows(2) {
                    let span = w[0]..w[1];
                    softmax_backward(&y[span.clone()], &g.as_slice()[span.clone()], &mut dx.as_mut_slice()[span]);
                }
                acc(*s, dx);
            }
            Op::ScatterAddRows(x, dst) => {
                let idx: Vec<usize> = dst.iter().copied().collect();
                acc(*x, g.gather_rows(&idx));
            }
            Op::PairwiseSqDist(x, y) => {
                let (xv, yv) = (val(*x), val(*y));
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dy = Matrix::zeros(yv.rows(), yv.cols());
                for i in 0..xv.rows() {
                    for j in 0..yv.rows() {
                        let gij = 2.0 * g.get(i, j);
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..xv.cols() {
                            let d = gij * (xv.get(i, k) - yv.get(j, k));
                            dx.set(i, k, dx.get(i, k) + d);
                            dy.set(j, k, dy.get(j, k) - d);
                        }
                    }
                }
                acc(*x, dx);
                acc(*y, dy);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let inner = crate::matrix::dot(y, g);
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *d = yi * (gi - inner);
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`. Returns the largest element-wise relative
/// error, using `max(|a|, |b|, 1e-6 * max(1, |f|))` as denominator: central
/// differences cannot resolve gradients much smaller than `eps * |f| / h`
/// from rounding noise, so those entries are held to an absolute bound.
pub fn grad_check<F>(f: F, inputs: &[Matrix], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.shape(out) != (1, 1) {
            return Err(Error::input("grad_check needs a scalar-valued function"));
        }
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let floor = 1e-6 * tape.scalar(out).abs().max(1.0);

    let mut worst = 0.0f64;
    let mut probe: Vec<Matrix> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.rows(), input.cols());
        for e in 0..input.len() {
            let orig = input.as_slice()[e];
            probe[k].as_mut_slice()[e] = orig + h;
            let plus = eval(&probe)?;
            probe[k].as_mut_slice()[e] = orig - h;
            let minus = eval(&probe)?;
            probe[k].as_mut_slice()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(3.0));
        let y = t.hadamard(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn doubled_use_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(1, 2, vec![1.5, -2.0]).unwrap());
        let y = t.add(x, x).unwrap();
        let s = t.reduce_sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_fn(4, 5, |i, j| (i as f64 - 2.0) * 10.0 + j as f64));
        let y = t.row_softmax(x).unwrap();
        for i in 0..4 {
            let s: f64 = t.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 2));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.backward(a), Err(Error::Input(_))));
        let bias = t.constant(Matrix::zeros(1, 2));
        assert!(t.add_row(a, bias).is_err());
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::scalar(-1.0));
        match t.log(x) {
            Err(Error::Numeric { op }) => assert_eq!(op, "log"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let r = grad_check(|t, v| t.relu(v[0]), &[Matrix::zeros(2, 2)], 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn linear_function_is_exact() {
        let w = Matrix::from_fn(3, 2, |i, j| 0.3 * i as f64 - 0.7 * j as f64 + 0.1);
        let err = grad_check(
            |t, v| {
                let s = t.scale(v[0], 2.5)?;
                t.reduce_sum(s)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
