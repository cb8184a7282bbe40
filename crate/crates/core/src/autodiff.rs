//! Reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Vectors are represented as `1×n` (row) or `n×1` (column)
//! matrices. Binary elementwise ops broadcast along any axis of length one.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{domain, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    Powf(Var, T),
    MaxConst(Var, T),
    Huber(Var, T),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    RowSoftmax(Var),
    ColSoftmax(Var),
    RowLogSoftmax(Var),
    NormalizeRows(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    ReverseGrad(Var, T),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations with their forward values.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn reduce_to<T: Scalar>(g: Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn shape_of<T>(a: &Array2<T>) -> (usize, usize) {
    (a.nrows(), a.ncols())
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast {a:?} vs {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn broadcast_binary<T: Scalar>(a: &Array2<T>, b: &Array2<T>, f: impl Fn(T, T) -> T) -> Array2<T> {
    let shape = broadcast_shape(shape_of(a), shape_of(b));
    let av = a.broadcast(shape).expect("broadcast lhs");
    let bv = b.broadcast(shape).expect("broadcast rhs");
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

fn row_softmax<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn row_log_softmax<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_constant(&mut self, v: T) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape_of(&self.nodes[v.0].value)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.nrows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.ncols()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(shape_of(a), (1, 1));
        a[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let bt = self.transpose(b);
        self.matmul(a, bt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| -x);
        self.push(value, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        self.push(value, Op::Offset(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.exp());
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln());
        self.push(value, Op::Ln(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.softplus());
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.sqrt());
        self.push(value, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let value = self.value(a).mapv(|x| x.powf(p));
        self.push(value, Op::Powf(a, p), &[a])
    }

    /// `max(x, c)` elementwise; the gradient is zero where the floor is active.
    pub fn max_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x.max(c));
        self.push(value, Op::MaxConst(a, c), &[a])
    }

    /// Huber (smooth-L1) penalty with transition point `delta`.
    pub fn huber(&mut self, a: Var, delta: T) -> Var {
        let half = T::c(0.5);
        let value = self.value(a).mapv(|x| {
            let ax = x.abs();
            if ax <= delta {
                half * x * x
            } else {
                delta * (ax - half * delta)
            }
        });
        self.push(value, Op::Huber(a, delta), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// Sum across columns: `m×n → m×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(a), &[a])
    }

    /// Sum across rows: `m×n → 1×n`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumCols(a), &[a])
    }

    /// Column mean: `m×n → 1×n`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let m = self.rows(a);
        let s = self.sum_cols(a);
        self.scale(s, T::one() / T::from_usize_lossy(m))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = row_softmax(self.value(a).view());
        self.push(value, Op::RowSoftmax(a), &[a])
    }

    /// Softmax over rows, independently for every column.
    pub fn col_softmax(&mut self, a: Var) -> Var {
        let value = row_softmax(self.value(a).t()).reversed_axes();
        self.push(value, Op::ColSoftmax(a), &[a])
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let value = row_log_softmax(self.value(a).view());
        self.push(value, Op::RowLogSoftmax(a), &[a])
    }

    /// Scales every row to unit L2 norm. A zero row is a domain error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) {
                return Err(domain!("row {i} has zero norm"));
            }
            row.mapv_inplace(|v| v / n);
        }
        Ok(self.push(value, Op::NormalizeRows(a), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows_opt(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((idx.len(), src.ncols()));
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                value.row_mut(r).assign(&src.row(i));
            }
        }
        self.push(value, Op::GatherRows(a, idx), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        self.gather_rows_opt(a, idx.iter().map(|&i| Some(i)).collect())
    }

    /// Gradient reversal: identity forward, multiplies the incoming gradient
    /// by `-scale` on the way back.
    pub fn reverse_grad(&mut self, a: Var, scale: T) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::ReverseGrad(a, scale), &[a])
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn accumulate(&mut self, v: Var, g: Array2<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the `1×1` node `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward target must be 1x1");
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop(i, op, &g);
            self.grads[i] = Some(g);
        }
    }

    fn backprop(&mut self, i: usize, op: Op<T>, g: &Array2<T>) {
        let one = T::one();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    let ga = g.dot(&self.value(b).t());
                    self.accumulate(a, ga);
                }
                if self.requires_grad(b) {
                    let gb = self.value(a).t().dot(g);
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(a, g.t().to_owned()),
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                self.accumulate(a, reduce_to(g.clone(), sa));
                self.accumulate(b, reduce_to(g.clone(), sb));
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                self.accumulate(a, reduce_to(g.clone(), sa));
                self.accumulate(b, reduce_to(g.mapv(|x| -x), sb));
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                if self.requires_grad(a) {
                    let ga = broadcast_binary(g, self.value(b), |x, y| x * y);
                    self.accumulate(a, reduce_to(ga, sa));
                }
                if self.requires_grad(b) {
                    let gb = broadcast_binary(g, self.value(a), |x, y| x * y);
                    self.accumulate(b, reduce_to(gb, sb));
                }
            }
            Op::Div(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                if self.requires_grad(a) {
                    let ga = broadcast_binary(g, self.value(b), |x, y| x / y);
                    self.accumulate(a, reduce_to(ga, sa));
                }
                if self.requires_grad(b) {
                    // d(a/b)/db = -out / b
                    let t = broadcast_binary(g, &self.nodes[i].value, |x, y| x * y);
                    let gb = broadcast_binary(&t, self.value(b), |x, y| -x / y);
                    self.accumulate(b, reduce_to(gb, sb));
                }
            }
            Op::Neg(a) => self.accumulate(a, g.mapv(|x| -x)),
            Op::Scale(a, c) => self.accumulate(a, g.mapv(|x| x * c)),
            Op::Offset(a) => self.accumulate(a, g.clone()),
            Op::Exp(a) => {
                let ga = g * &self.nodes[i].value;
                self.accumulate(a, ga);
            }
            Op::Ln(a) => {
                let ga = g / self.value(a);
                self.accumulate(a, ga);
            }
            Op::Tanh(a) => {
                let ga = Zip::from(g)
                    .and(&self.nodes[i].value)
                    .map_collect(|&g, &y| g * (one - y * y));
                self.accumulate(a, ga);
            }
            Op::Relu(a) => {
                let ga = Zip::from(g)
                    .and(self.value(a))
                    .map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() });
                self.accumulate(a, ga);
            }
            Op::Softplus(a) => {
                let ga = Zip::from(g).and(self.value(a)).map_collect(|&g, &x| g * x.sigmoid());
                self.accumulate(a, ga);
            }
            Op::Sqrt(a) => {
                let half = T::c(0.5);
                let ga = Zip::from(g)
                    .and(&self.nodes[i].value)
                    .map_collect(|&g, &y| g * half / y);
                self.accumulate(a, ga);
            }
            Op::Square(a) => {
                let two = T::c(2.0);
                let ga = Zip::from(g).and(self.value(a)).map_collect(|&g, &x| g * two * x);
                self.accumulate(a, ga);
            }
            Op::Powf(a, p) => {
                let ga = Zip::from(g)
                    .and(self.value(a))
                    .map_collect(|&g, &x| g * p * x.powf(p - one));
                self.accumulate(a, ga);
            }
            Op::MaxConst(a, c) => {
                let ga = Zip::from(g)
                    .and(self.value(a))
                    .map_collect(|&g, &x| if x > c { g } else { T::zero() });
                self.accumulate(a, ga);
            }
            Op::Huber(a, delta) => {
                let ga = Zip::from(g).and(self.value(a)).map_collect(|&g, &x| {
                    if x.abs() <= delta {
                        g * x
                    } else {
                        g * delta * x.signum()
                    }
                });
                self.accumulate(a, ga);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.shape(a), g[[0, 0]]);
                self.accumulate(a, ga);
            }
            Op::SumRows(a) => {
                let ga = g.broadcast(self.shape(a)).expect("column broadcast").to_owned();
                self.accumulate(a, ga);
            }
            Op::SumCols(a) => {
                let ga = g.broadcast(self.shape(a)).expect("row broadcast").to_owned();
                self.accumulate(a, ga);
            }
            Op::RowSoftmax(a) => {
                let y = &self.nodes[i].value;
                let mut ga = g * y;
                let dot = ga.sum_axis(Axis(1)).insert_axis(Axis(1));
                ga -= &(y * &dot);
                self.accumulate(a, ga);
            }
            Op::ColSoftmax(a) => {
                let y = &self.nodes[i].value;
                let mut ga = g * y;
                let dot = ga.sum_axis(Axis(0)).insert_axis(Axis(0));
                ga -= &(y * &dot);
                self.accumulate(a, ga);
            }
            Op::RowLogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let ga = g - &(y.mapv(|v| v.exp()) * &gsum);
                self.accumulate(a, ga);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(a);
                let y = &self.nodes[i].value;
                let mut ga = g.clone();
                for r in 0..ga.nrows() {
                    let n = x.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    let gy: T = g.row(r).dot(&y.row(r));
                    let yr = y.row(r);
                    ga.row_mut(r).zip_mut_with(&yr, |gv, &yv| *gv = (*gv - yv * gy) / n);
                }
                self.accumulate(a, ga);
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(self.shape(a));
                ga.slice_mut(s![start..start + g.nrows(), ..]).assign(g);
                self.accumulate(a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let r = self.rows(p);
                    let gp = g.slice(s![at..at + r, ..]).to_owned();
                    self.accumulate(p, gp);
                    at += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let c = self.cols(p);
                    let gp = g.slice(s![.., at..at + c]).to_owned();
                    self.accumulate(p, gp);
                    at += c;
                }
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Array2::zeros(self.shape(a));
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(r);
                    }
                }
                self.accumulate(a, ga);
            }
            Op::ReverseGrad(a, scale) => self.accumulate(a, g.mapv(|x| -x * scale)),
        }
    }
}
