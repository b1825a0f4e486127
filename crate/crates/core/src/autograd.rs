//! A small reverse-mode automatic differentiation tape over dense row-major
//! `f64` matrices.
//!
//! Every training objective in the crate (BCE through the backbones, the
//! CVAE alignment and reconstruction terms, the Sinkhorn-based epistemic
//! term) is assembled on a [`Graph`] and differentiated with
//! [`Graph::backward`]. The Sinkhorn soft-min half-steps, the transport plan
//! cost, and the pairwise squared distance are fused nodes so that a ten
//! iteration loop over a few hundred points does not materialise dozens of
//! `M x M` intermediates.

use std::rc::Rc;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(1, 1, vec![value])
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn column(values: &[f64]) -> Self {
        Tensor::new(values.len(), 1, values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Scalar value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(n, m, out)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum `self` down to `shape`, undoing a broadcast.
    fn reduce_to(&self, shape: (usize, usize)) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let mut out = Tensor::zeros(shape.0, shape.1);
        for r in 0..self.rows {
            let orow = if shape.0 == 1 { 0 } else { r };
            for c in 0..self.cols {
                let ocol = if shape.1 == 1 { 0 } else { c };
                out.data[orow * shape.1 + ocol] += self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Ln,
    Tanh,
    Relu,
    Sigmoid,
    Square,
}

/// Which index of the cost matrix a soft-min reduces over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    /// `f_i = -eps * ln sum_j exp(lw_j + (h_j - C_ij) / eps)`, output `n x 1`.
    OverColumns,
    /// `g_j = -eps * ln sum_i exp(lw_i + (h_i - C_ij) / eps)`, output `m x 1`.
    OverRows,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    EmbedBag(Var, Rc<Vec<Vec<usize>>>),
    SqDist(Var, Var),
    SoftMin {
        cost: Var,
        potential: Var,
        log_weights: Rc<Vec<f64>>,
        eps: f64,
        reduce: Reduce,
    },
    PlanCost {
        cost: Var,
        f: Var,
        g: Var,
        log_a: Rc<Vec<f64>>,
        log_b: Rc<Vec<f64>>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> f64 {
    let rr = if t.rows == 1 { 0 } else { r };
    let cc = if t.cols == 1 { 0 } else { c };
    t.data[rr * t.cols + cc]
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Forward soft-min used by both the tape and the value-only Sinkhorn path.
pub(crate) fn soft_min(cost: &Tensor, potential: &[f64], log_weights: &[f64], eps: f64, reduce: Reduce) -> Vec<f64> {
    let (n, m) = cost.shape();
    match reduce {
        Reduce::OverColumns => {
            let mut buf = vec![0.0; m];
            (0..n)
                .map(|i| {
                    for ((z, c), (lw, p)) in buf.iter_mut().zip(cost.row_slice(i)).zip(log_weights.iter().zip(potential)) {
                        *z = lw + (p - c) / eps;
                    }
                    -eps * log_sum_exp(&buf)
                })
                .collect()
        }
        Reduce::OverRows => {
            // Two row-major passes: column maxima, then shifted sums.
            let shift: Vec<f64> = (0..n).map(|i| log_weights[i] + potential[i] / eps).collect();
            let mut max = vec![f64::NEG_INFINITY; m];
            for (i, s) in shift.iter().enumerate() {
                for (mx, c) in max.iter_mut().zip(cost.row_slice(i)) {
                    *mx = mx.max(s - c / eps);
                }
            }
            let mut sum = vec![0.0; m];
            for (i, s) in shift.iter().enumerate() {
                for ((acc, c), mx) in sum.iter_mut().zip(cost.row_slice(i)).zip(&max) {
                    *acc += (s - c / eps - mx).exp();
                }
            }
            max.iter()
                .zip(&sum)
                .map(|(mx, sm)| if mx.is_finite() { -eps * (mx + sm.ln()) } else { -eps * mx })
                .collect()
        }
    }
}

/// `sum_ij P_ij C_ij` with `P_ij = exp(la_i + lb_j + (f_i + g_j - C_ij) / eps)`.
pub(crate) fn plan_cost(cost: &Tensor, f: &[f64], g: &[f64], log_a: &[f64], log_b: &[f64], eps: f64) -> f64 {
    let (n, m) = cost.shape();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = cost.get(i, j);
            total += (log_a[i] + log_b[j] + (f[i] + g[j] - c) / eps).exp() * c;
        }
    }
    total
}

pub(crate) fn sq_dist(x: &Tensor, y: &Tensor) -> Tensor {
    assert_eq!(x.cols, y.cols, "point dimension");
    let (n, m, d) = (x.rows, y.rows, x.cols);
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let xi = x.row_slice(i);
        for j in 0..m {
            let yj = y.row_slice(j);
            let mut s = 0.0;
            for k in 0..d {
                let diff = xi[k] - yj[k];
                s += diff * diff;
            }
            out.data[i * m + j] = s;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape());
        let mut data = Vec::with_capacity(shape.0 * shape.1);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let (x, y) = (bidx(ta, r, c), bidx(tb, r, c));
                data.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape.0, shape.1, data), Op::Binary(kind, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Square => |x| x * x,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = t.reduce_to((1, t.cols));
        let rg = self.rg(a);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Sum over columns: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = t.reduce_to((t.rows, 1));
        let rg = self.rg(a);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row_slice(r));
            }
            offset += t.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice out of range");
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.row_slice_mut(r).copy_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(index.len(), t.cols);
        for (r, &i) in index.iter().enumerate() {
            out.row_slice_mut(r).copy_from_slice(t.row_slice(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows(a, Rc::new(index)), rg)
    }

    /// Mean of the table rows named by each bag; one output row per bag.
    pub fn embed_bag(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(bags.len(), t.cols);
        for (r, bag) in bags.iter().enumerate() {
            assert!(!bag.is_empty(), "empty embedding bag");
            let w = 1.0 / bag.len() as f64;
            let orow = &mut out.data[r * t.cols..(r + 1) * t.cols];
            for &i in bag {
                for (o, &x) in orow.iter_mut().zip(t.row_slice(i)) {
                    *o += w * x;
                }
            }
        }
        let rg = self.rg(table);
        self.push(out, Op::EmbedBag(table, Rc::new(bags)), rg)
    }

    /// Pairwise squared Euclidean distances between the rows of `x` and `y`.
    pub fn sq_dist(&mut self, x: Var, y: Var) -> Var {
        let value = sq_dist(self.value(x), self.value(y));
        let rg = self.rg(x) || self.rg(y);
        self.push(value, Op::SqDist(x, y), rg)
    }

    /// Log-domain Sinkhorn half-step; see [`Reduce`].
    pub fn soft_min(&mut self, cost: Var, potential: Var, log_weights: Rc<Vec<f64>>, eps: f64, reduce: Reduce) -> Var {
        let out = soft_min(self.value(cost), self.value(potential).data(), &log_weights, eps, reduce);
        let value = Tensor::column(&out);
        let rg = self.rg(cost) || self.rg(potential);
        self.push(
            value,
            Op::SoftMin {
                cost,
                potential,
                log_weights,
                eps,
                reduce,
            },
            rg,
        )
    }

    /// Transport cost `<P, C>` of the plan induced by potentials `f`, `g`.
    pub fn plan_cost(&mut self, cost: Var, f: Var, g: Var, log_a: Rc<Vec<f64>>, log_b: Rc<Vec<f64>>, eps: f64) -> Var {
        let total = plan_cost(self.value(cost), self.value(f).data(), self.value(g).data(), &log_a, &log_b, eps);
        let rg = self.rg(cost) || self.rg(f) || self.rg(g);
        self.push(
            Tensor::scalar(total),
            Op::PlanCost {
                cost,
                f,
                g,
                log_a,
                log_b,
                eps,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, cols) = out.shape();
                let mut ga = Tensor::zeros(rows, cols);
                let mut gb = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let g = grad.data[r * cols + c];
                        let (x, y) = (bidx(ta, r, c), bidx(tb, r, c));
                        let (da, db) = match kind {
                            Binary::Add => (g, g),
                            Binary::Sub => (g, -g),
                            Binary::Mul => (g * y, g * x),
                            Binary::Div => (g / y, -g * x / (y * y)),
                        };
                        ga.data[r * cols + c] = da;
                        gb.data[r * cols + c] = db;
                    }
                }
                if self.rg(*a) {
                    self.accumulate(grads, *a, ga.reduce_to(ta.shape()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gb.reduce_to(tb.shape()));
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let data = grad
                    .data
                    .iter()
                    .zip(&x.data)
                    .zip(&out.data)
                    .map(|((&g, &xi), &yi)| match kind {
                        Unary::Exp => g * yi,
                        Unary::Ln => g / xi,
                        Unary::Tanh => g * (1.0 - yi * yi),
                        Unary::Relu => {
                            if xi > 0.0 {
                                g
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => g * yi * (1.0 - yi),
                        Unary::Square => 2.0 * g * xi,
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.rows, x.cols, data));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, grad.map(|g| g * k)),
            Op::Offset(a) => self.accumulate(grads, *a, grad.clone()),
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let data = grad
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&g, &xi)| if xi < *lo || xi > *hi { 0.0 } else { g })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.rows, x.cols, data));
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let gb = grad.matmul(&self.value(*b).transpose());
                    self.accumulate(grads, *a, gb);
                }
                if self.rg(*b) {
                    let ga = self.value(*a).transpose().matmul(grad);
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, grad.transpose()),
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, grad.item()));
            }
            Op::SumRows(a) | Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        g.data[i * c + j] = bidx(grad, i, j);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.rg(p) {
                        let mut g = Tensor::zeros(grad.rows, cols);
                        for r in 0..grad.rows {
                            g.row_slice_mut(r).copy_from_slice(&grad.row_slice(r)[offset..offset + cols]);
                        }
                        self.accumulate(grads, p, g);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    g.row_slice_mut(i)[*start..*start + grad.cols].copy_from_slice(grad.row_slice(i));
                }
                self.accumulate(grads, *a, g);
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.value(*a).shape();
                let mut g = Tensor::zeros(r, c);
                for (row, &i) in index.iter().enumerate() {
                    for (o, &x) in g.row_slice_mut(i).iter_mut().zip(grad.row_slice(row)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::EmbedBag(table, bags) => {
                let (r, c) = self.value(*table).shape();
                let mut g = Tensor::zeros(r, c);
                for (row, bag) in bags.iter().enumerate() {
                    let w = 1.0 / bag.len() as f64;
                    for &i in bag {
                        for (o, &x) in g.row_slice_mut(i).iter_mut().zip(grad.row_slice(row)) {
                            *o += w * x;
                        }
                    }
                }
                self.accumulate(grads, *table, g);
            }
            Op::SqDist(x, y) => {
                let (tx, ty) = (self.value(*x), self.value(*y));
                let (n, m, d) = (tx.rows, ty.rows, tx.cols);
                let mut gx = Tensor::zeros(n, d);
                let mut gy = Tensor::zeros(m, d);
                for i in 0..n {
                    for j in 0..m {
                        let g = 2.0 * grad.data[i * m + j];
                        if g == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = g * (tx.data[i * d + k] - ty.data[j * d + k]);
                            gx.data[i * d + k] += diff;
                            gy.data[j * d + k] -= diff;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *y, gy);
            }
            Op::SoftMin {
                cost,
                potential,
                log_weights,
                eps,
                reduce,
            } => {
                let c = self.value(*cost);
                let h = self.value(*potential);
                let (n, m) = c.shape();
                let mut gc = Tensor::zeros(n, m);
                let mut gh = Tensor::zeros(h.rows, h.cols);
                // Softmax weights are recomputed from the stored output:
                // w = exp(lw + (h - C)/eps + out/eps).
                for i in 0..n {
                    for j in 0..m {
                        let (red, kept) = match reduce {
                            Reduce::OverColumns => (j, i),
                            Reduce::OverRows => (i, j),
                        };
                        let w = (log_weights[red] + (h.data[red] - c.get(i, j)) / eps + out.data[kept] / eps).exp();
                        let gw = grad.data[kept] * w;
                        gc.data[i * m + j] = gw;
                        gh.data[red] -= gw;
                    }
                }
                self.accumulate(grads, *cost, gc);
                self.accumulate(grads, *potential, gh);
            }
            Op::PlanCost {
                cost,
                f,
                g,
                log_a,
                log_b,
                eps,
            } => {
                let s = grad.item();
                let c = self.value(*cost);
                let (tf, tg) = (self.value(*f), self.value(*g));
                let (n, m) = c.shape();
                let mut gc = Tensor::zeros(n, m);
                let mut gf = Tensor::zeros(n, 1);
                let mut gg = Tensor::zeros(m, 1);
                for i in 0..n {
                    for j in 0..m {
                        let cij = c.get(i, j);
                        let p = (log_a[i] + log_b[j] + (tf.data[i] + tg.data[j] - cij) / eps).exp();
                        gc.data[i * m + j] = s * p * (1.0 - cij / eps);
                        let pc = s * p * cij / eps;
                        gf.data[i] += pc;
                        gg.data[j] += pc;
                    }
                }
                self.accumulate(grads, *cost, gc);
                self.accumulate(grads, *f, gf);
                self.accumulate(grads, *g, gg);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(build(x))/dx for every entry of x.
    fn check(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.rows, x0.cols));
        let h = 1e-6;
        for k in 0..x0.data.len() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data[k] += delta;
                let mut g = Graph::new();
                let x = g.constant(t);
                let y = build(&mut g, x);
                g.scalar_value(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {k}: analytic {a} vs numeric {numeric}");
        }
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bias = random(&mut rng, 1, 3);
        let col = random(&mut rng, 4, 1).map(|x| x.abs() + 0.5);
        check(random(&mut rng, 4, 3), |g, x| {
            let b = g.constant(bias.clone());
            let c = g.constant(col.clone());
            let y = g.add(x, b);
            let y = g.mul(y, c);
            let y = g.tanh(y);
            let z = g.div(y, c);
            let s = g.sigmoid(z);
            let q = g.square(s);
            g.sum(q)
        });
    }

    #[test]
    fn broadcast_operand_receives_reduced_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(&mut rng, 5, 3);
        check(random(&mut rng, 1, 3), |g, x| {
            let m = g.constant(m.clone());
            let y = g.sub(m, x);
            let y = g.exp(y);
            let r = g.sum_rows(y);
            let c = g.sum_cols(r);
            g.ln(c)
        });
    }

    #[test]
    fn matmul_concat_slice_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 5, 2);
        check(random(&mut rng, 4, 3), |g, x| {
            let w = g.constant(w.clone());
            let t = g.transpose(x);
            let both = g.concat_cols(&[x, x]);
            let part = g.slice_cols(both, 1, 5);
            let y = g.matmul(part, w);
            let y = g.gather_rows(y, vec![0, 2, 2, 3]);
            let s1 = g.sum(y);
            let s2 = g.sum(t);
            let s = g.mul(s1, s2);
            g.square(s)
        });
    }

    #[test]
    fn embed_bag_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(random(&mut rng, 6, 3), |g, x| {
            let e = g.embed_bag(x, vec![vec![0, 1], vec![5], vec![1, 2, 1]]);
            let e = g.square(e);
            g.sum(e)
        });
    }

    #[test]
    fn fused_sinkhorn_nodes_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random(&mut rng, 4, 2);
        let lw = Rc::new(vec![-(3f64).ln(); 3]);
        let lv = Rc::new(vec![-(4f64).ln(); 4]);
        check(random(&mut rng, 3, 2), |g, x| {
            let yv = g.constant(y.clone());
            let c = g.sq_dist(x, yv);
            let zero = g.constant(Tensor::zeros(4, 1));
            let f = g.soft_min(c, zero, lv.clone(), 0.3, Reduce::OverColumns);
            let h = g.soft_min(c, f, lw.clone(), 0.3, Reduce::OverRows);
            let f = g.soft_min(c, h, lv.clone(), 0.3, Reduce::OverColumns);
            g.plan_cost(c, f, h, lw.clone(), lv.clone(), 0.3)
        });
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[-20.0, 0.5, 20.0]));
        let y = g.clamp(x, -15.0, 15.0);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 2.0);
    }
}
