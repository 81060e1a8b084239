//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Only the operations the neural-process models need are provided. Every node records
//! whether it depends on a gradient-requiring leaf, so backward never does work for data
//! constants.

use std::cell::{Ref, RefCell};

use super::tensor::{gemm, Real, Tensor, View};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    GroupMean { x: Var, group: usize },
    RepeatRows { x: Var, times: usize },
    Tile { x: Var },
    Gather { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Attention(Box<AttentionRecord<T>>),
}

struct AttentionRecord<T> {
    q: Var,
    k: Var,
    v: Var,
    groups: usize,
    heads: usize,
    /// Softmax weights laid out `[groups, heads, m, n]`.
    weights: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].grad)
    }

    /// A data tensor that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (parameters, or inputs under a gradient check).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    fn unary(&self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        let grad = self.needs(&[x]);
        self.push(out, op, grad)
    }

    fn binary(&self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "elementwise operands must match");
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(va.rows(), va.cols(), data).expect("shape preserved")
        };
        let grad = self.needs(&[a, b]);
        self.push(out, op, grad)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(&self.value(b)).expect("matmul shapes");
        let grad = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), grad)
    }

    /// Adds a `[1, c]` row to every row of `x`.
    pub fn add_row(&self, x: Var, row: Var) -> Var {
        let out = {
            let (vx, vb) = (self.value(x), self.value(row));
            assert_eq!(vb.shape(), (1, vx.cols()), "bias shape");
            let mut out = vx.clone();
            let c = vx.cols();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o += vb.data()[i % c];
            }
            out
        };
        let grad = self.needs(&[x, row]);
        self.push(out, Op::AddRow(x, row), grad)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn offset(&self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = vals[0].rows();
            assert!(vals.iter().all(|v| v.rows() == rows), "concat row counts");
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::from_vec(rows, cols, data).expect("concat shape")
        };
        let grad = self.needs(parts);
        self.push(out, Op::Concat(parts.to_vec()), grad)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let out = {
            let v = self.value(x);
            assert!(start + len <= v.cols(), "slice out of range");
            Tensor::from_fn(v.rows(), len, |r, c| v.get(r, start + c))
        };
        let grad = self.needs(&[x]);
        self.push(out, Op::Slice { x, start }, grad)
    }

    /// Mean over consecutive row groups of size `group`: `[g * group, c] -> [g, c]`.
    pub fn group_mean(&self, x: Var, group: usize) -> Var {
        let out = {
            let v = self.value(x);
            assert!(group > 0 && v.rows() % group == 0, "group_mean group size");
            let groups = v.rows() / group;
            let inv = T::one() / T::of(group as f64);
            let mut out = Tensor::zeros(groups, v.cols());
            for g in 0..groups {
                for r in 0..group {
                    let row = v.row(g * group + r);
                    for (c, &val) in row.iter().enumerate() {
                        let o = out.get(g, c);
                        out.set(g, c, o + val);
                    }
                }
            }
            out.data_mut().iter_mut().for_each(|o| *o *= inv);
            out
        };
        let grad = self.needs(&[x]);
        self.push(out, Op::GroupMean { x, group }, grad)
    }

    /// Repeats each row `times` times consecutively: `[r, c] -> [r * times, c]`.
    pub fn repeat_rows(&self, x: Var, times: usize) -> Var {
        let out = {
            let v = self.value(x);
            let mut data = Vec::with_capacity(v.len() * times);
            for r in 0..v.rows() {
                for _ in 0..times {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::from_vec(v.rows() * times, v.cols(), data).expect("repeat shape")
        };
        let grad = self.needs(&[x]);
        self.push(out, Op::RepeatRows { x, times }, grad)
    }

    /// Stacks `times` copies of the whole tensor: `[r, c] -> [times * r, c]`.
    pub fn tile(&self, x: Var, times: usize) -> Var {
        let out = {
            let v = self.value(x);
            let mut data = Vec::with_capacity(v.len() * times);
            for _ in 0..times {
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(v.rows() * times, v.cols(), data).expect("tile shape")
        };
        let grad = self.needs(&[x]);
        self.push(out, Op::Tile { x }, grad)
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&self, x: Var, index: Vec<usize>) -> Var {
        let out = {
            let v = self.value(x);
            let mut data = Vec::with_capacity(index.len() * v.cols());
            for &i in &index {
                data.extend_from_slice(v.row(i));
            }
            Tensor::from_vec(index.len(), v.cols(), data).expect("gather shape")
        };
        let grad = self.needs(&[x]);
        self.push(out, Op::Gather { x, index }, grad)
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let grad = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), grad)
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = {
            let v = self.value(x);
            v.data().iter().copied().sum::<T>() / T::of(v.len() as f64)
        };
        let grad = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), grad)
    }

    /// Sum over columns: `[r, c] -> [r, 1]`.
    pub fn row_sum(&self, x: Var) -> Var {
        let out = {
            let v = self.value(x);
            Tensor::from_fn(v.rows(), 1, |r, _| v.row(r).iter().copied().sum())
        };
        let grad = self.needs(&[x]);
        self.push(out, Op::RowSum(x), grad)
    }

    /// Scaled dot-product attention, batched over `groups` independent query/key sets and
    /// split into `heads` column blocks. `q` is `[groups * m, d]`, `k` and `v` are
    /// `[groups * n, d]`; the output is `[groups * m, d]` with heads concatenated.
    pub fn attention(&self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Var {
        let (out, weights) = {
            let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
            let d = vq.cols();
            assert!(
                groups > 0 && heads > 0 && d % heads == 0,
                "attention head split"
            );
            assert!(
                vk.cols() == d && vv.cols() == d && vk.rows() == vv.rows(),
                "attention shapes"
            );
            assert!(
                vq.rows() % groups == 0 && vk.rows() % groups == 0,
                "attention groups"
            );
            let m = vq.rows() / groups;
            let n = vk.rows() / groups;
            assert!(n > 0, "attention over an empty key set");
            let dh = d / heads;
            let scale = T::one() / T::of(dh as f64).sqrt();
            let mut weights = vec![T::zero(); groups * heads * m * n];
            let mut out = Tensor::zeros(vq.rows(), d);
            for g in 0..groups {
                for h in 0..heads {
                    let w = &mut weights[(g * heads + h) * m * n..(g * heads + h + 1) * m * n];
                    gemm(
                        m,
                        dh,
                        n,
                        scale,
                        View::at(vq.data(), g * m * d + h * dh, d, 1),
                        View::at(vk.data(), g * n * d + h * dh, 1, d),
                        T::zero(),
                        w,
                        0,
                        n,
                    );
                    for row in w.chunks_mut(n) {
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut total = T::zero();
                        for s in row.iter_mut() {
                            *s = (*s - max).exp();
                            total += *s;
                        }
                        for s in row.iter_mut() {
                            *s = *s / total;
                        }
                    }
                    gemm(
                        m,
                        n,
                        dh,
                        T::one(),
                        View::rows(w, n),
                        View::at(vv.data(), g * n * d + h * dh, d, 1),
                        T::zero(),
                        out.data_mut(),
                        g * m * d + h * dh,
                        d,
                    );
                }
            }
            (out, weights)
        };
        let grad = self.needs(&[q, k, v]);
        self.push(
            out,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                groups,
                heads,
                weights,
            })),
            grad,
        )
    }

    /// Attention weights of the most recent attention node that produced `out`, laid
    /// out `[groups, heads, m, n]`.
    pub fn attention_weights(&self, out: Var) -> Option<Vec<T>> {
        match &self.nodes.borrow()[out.0].op {
            Op::Attention(rec) => Some(rec.weights.clone()),
            _ => None,
        }
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.shape(),
            (1, 1),
            "backward needs a scalar root"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));

        let acc = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, g: Tensor<T>| {
            if !nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    if needs(*a) {
                        let mut ga = Tensor::zeros(m, k);
                        gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            View::rows(gout.data(), n),
                            View::transposed(vb.data(), n),
                            T::zero(),
                            ga.data_mut(),
                            0,
                            k,
                        );
                        acc(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let mut gb = Tensor::zeros(k, n);
                        gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            View::transposed(va.data(), k),
                            View::rows(gout.data(), n),
                            T::zero(),
                            gb.data_mut(),
                            0,
                            n,
                        );
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, row) => {
                    if needs(*row) {
                        let c = gout.cols();
                        let mut gb = Tensor::zeros(1, c);
                        for r in 0..gout.rows() {
                            for (j, &g) in gout.row(r).iter().enumerate() {
                                gb.data_mut()[j] += g;
                            }
                        }
                        acc(&mut grads, *row, gb);
                    }
                    acc(&mut grads, *x, gout);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, gout.clone());
                    acc(&mut grads, *a, gout);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, gout.map(|g| -g));
                    acc(&mut grads, *a, gout);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        acc(&mut grads, *a, zip(&gout, vb, |g, y| g * y));
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, zip(&gout, va, |g, x| g * x));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        acc(&mut grads, *a, zip(&gout, vb, |g, y| g / y));
                    }
                    if needs(*b) {
                        let gb = Tensor::from_fn(gout.rows(), gout.cols(), |r, c| {
                            let y = vb.get(r, c);
                            -gout.get(r, c) * va.get(r, c) / (y * y)
                        });
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(&mut grads, *x, gout.map(|g| g * c));
                }
                Op::Offset(x) => acc(&mut grads, *x, gout),
                Op::Relu(x) => {
                    let g = zip(
                        &gout,
                        val(*x),
                        |g, x| if x > T::zero() { g } else { T::zero() },
                    );
                    acc(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let g = zip(&gout, &node.value, |g, y| g * (T::one() - y * y));
                    acc(&mut grads, *x, g);
                }
                Op::Softplus(x) => {
                    let g = zip(&gout, val(*x), |g, x| g * sigmoid(x));
                    acc(&mut grads, *x, g);
                }
                Op::Exp(x) => {
                    let g = zip(&gout, &node.value, |g, y| g * y);
                    acc(&mut grads, *x, g);
                }
                Op::Log(x) => {
                    let g = zip(&gout, val(*x), |g, x| g / x);
                    acc(&mut grads, *x, g);
                }
                Op::Square(x) => {
                    let two = T::of(2.0);
                    let g = zip(&gout, val(*x), |g, x| two * g * x);
                    acc(&mut grads, *x, g);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if needs(p) {
                            let g = Tensor::from_fn(gout.rows(), w, |r, c| gout.get(r, start + c));
                            acc(&mut grads, p, g);
                        }
                        start += w;
                    }
                }
                Op::Slice { x, start } => {
                    let vx = val(*x);
                    let mut g = Tensor::zeros(vx.rows(), vx.cols());
                    for r in 0..gout.rows() {
                        for c in 0..gout.cols() {
                            g.set(r, start + c, gout.get(r, c));
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::GroupMean { x, group } => {
                    let vx = val(*x);
                    let inv = T::one() / T::of(*group as f64);
                    let g =
                        Tensor::from_fn(vx.rows(), vx.cols(), |r, c| gout.get(r / group, c) * inv);
                    acc(&mut grads, *x, g);
                }
                Op::RepeatRows { x, times } => {
                    let vx = val(*x);
                    let mut g = Tensor::zeros(vx.rows(), vx.cols());
                    for r in 0..gout.rows() {
                        let dst = r / times;
                        for (c, &v) in gout.row(r).iter().enumerate() {
                            let o = g.get(dst, c);
                            g.set(dst, c, o + v);
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Tile { x } => {
                    let vx = val(*x);
                    let mut g = Tensor::zeros(vx.rows(), vx.cols());
                    let block = vx.len();
                    for chunk in gout.data().chunks(block) {
                        for (o, &v) in g.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Gather { x, index } => {
                    let vx = val(*x);
                    let mut g = Tensor::zeros(vx.rows(), vx.cols());
                    for (j, &i) in index.iter().enumerate() {
                        for (c, &v) in gout.row(j).iter().enumerate() {
                            let o = g.get(i, c);
                            g.set(i, c, o + v);
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Sum(x) => {
                    let vx = val(*x);
                    acc(
                        &mut grads,
                        *x,
                        Tensor::full(vx.rows(), vx.cols(), gout.item()),
                    );
                }
                Op::Mean(x) => {
                    let vx = val(*x);
                    let g = gout.item() / T::of(vx.len() as f64);
                    acc(&mut grads, *x, Tensor::full(vx.rows(), vx.cols(), g));
                }
                Op::RowSum(x) => {
                    let vx = val(*x);
                    let g = Tensor::from_fn(vx.rows(), vx.cols(), |r, _| gout.get(r, 0));
                    acc(&mut grads, *x, g);
                }
                Op::Attention(rec) => {
                    let (gq, gk, gv) =
                        attention_backward(rec, val(rec.q), val(rec.k), val(rec.v), &gout);
                    acc(&mut grads, rec.q, gq);
                    acc(&mut grads, rec.k, gk);
                    acc(&mut grads, rec.v, gv);
                }
            }
        }
        Gradients { grads }
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("zip shape")
}

fn attention_backward<T: Real>(
    rec: &AttentionRecord<T>,
    vq: &Tensor<T>,
    vk: &Tensor<T>,
    vv: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (groups, heads) = (rec.groups, rec.heads);
    let d = vq.cols();
    let m = vq.rows() / groups;
    let n = vk.rows() / groups;
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut gq = Tensor::zeros(vq.rows(), d);
    let mut gk = Tensor::zeros(vk.rows(), d);
    let mut gv = Tensor::zeros(vv.rows(), d);
    let mut d_w = vec![T::zero(); m * n];
    for g in 0..groups {
        for h in 0..heads {
            let w = &rec.weights[(g * heads + h) * m * n..(g * heads + h + 1) * m * n];
            let q_off = g * m * d + h * dh;
            let kv_off = g * n * d + h * dh;
            // dW = dO @ V^T
            gemm(
                m,
                dh,
                n,
                T::one(),
                View::at(gout.data(), q_off, d, 1),
                View::at(vv.data(), kv_off, 1, d),
                T::zero(),
                &mut d_w,
                0,
                n,
            );
            // dV = W^T @ dO
            gemm(
                n,
                m,
                dh,
                T::one(),
                View::transposed(w, n),
                View::at(gout.data(), q_off, d, 1),
                T::zero(),
                gv.data_mut(),
                kv_off,
                d,
            );
            // softmax backward, folded with the logit scale
            for (dw_row, w_row) in d_w.chunks_mut(n).zip(w.chunks(n)) {
                let dot: T = dw_row.iter().zip(w_row).map(|(&a, &b)| a * b).sum();
                for (ds, &p) in dw_row.iter_mut().zip(w_row) {
                    *ds = p * (*ds - dot) * scale;
                }
            }
            // dQ = dS @ K
            gemm(
                m,
                n,
                dh,
                T::one(),
                View::rows(&d_w, n),
                View::at(vk.data(), kv_off, d, 1),
                T::zero(),
                gq.data_mut(),
                q_off,
                d,
            );
            // dK = dS^T @ Q
            gemm(
                n,
                m,
                dh,
                T::one(),
                View::transposed(&d_w, n),
                View::at(vq.data(), q_off, d, 1),
                T::zero(),
                gk.data_mut(),
                kv_off,
                d,
            );
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(1, 2, &[1.0, 2.0]));
        let w = g.leaf(t(2, 1, &[3.0, 4.0]));
        let y = g.matmul(x, w);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_node_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(1, 1, &[3.0]));
        let y = g.mul(x, x);
        let s = g.add(y, x);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(1, 3, &[-1e6, 0.0, 1e6]));
        let y = g.softplus(x);
        let v = g.value(y).clone();
        assert_eq!(v.get(0, 0), 0.0);
        assert!((v.get(0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v.get(0, 2), 1e6);
    }

    #[test]
    fn group_mean_and_repeat_shapes() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(4, 1, &[1.0, 3.0, 5.0, 7.0]));
        let m = g.group_mean(x, 2);
        assert_eq!(g.value(m).data(), &[2.0, 6.0]);
        let r = g.repeat_rows(m, 3);
        assert_eq!(g.value(r).data(), &[2.0, 2.0, 2.0, 6.0, 6.0, 6.0]);
        let tl = g.tile(m, 2);
        assert_eq!(g.value(tl).data(), &[2.0, 6.0, 2.0, 6.0]);
    }
}
