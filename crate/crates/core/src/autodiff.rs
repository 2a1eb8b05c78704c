//! Reverse-mode automatic differentiation over flat `f64` vectors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Each [`Var`] is a
//! handle to one recorded node and denotes a vector of fixed length. Calling
//! [`Tape::backward`] on a scalar node replays the tape in reverse id order and
//! accumulates adjoints for every node that (transitively) depends on a
//! differentiable leaf.
//!
//! Tapes are cheap and meant to be rebuilt for every evaluation.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("output must be a scalar, got length {0}")]
    NotScalar(usize),
}

/// A dense row-major matrix that is not differentiated through.
///
/// Storage is shared, so cloning is cheap and a matrix can be referenced from
/// many tapes at once.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstMatrix {
    data: Arc<[f64]>,
    rows: usize,
    cols: usize,
}

impl ConstMatrix {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data does not match {rows}x{cols}");
        ConstMatrix { data: data.into(), rows, cols }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(data, n, n)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.data, self.rows, self.cols, x)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatVec { m: usize, x: usize, rows: usize, cols: usize },
    MaskedMatVec { m: usize, mask: Arc<[f64]>, x: usize, rows: usize, cols: usize },
    ConstMatVec { m: ConstMatrix, x: usize },
    Exp(usize),
    Log(usize),
    Elu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Square(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Sum(usize),
    Slice { x: usize, start: usize },
    Concat(Vec<usize>),
    Gather { x: usize, index: Arc<[usize]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatVec { .. } => "matvec",
            Op::MaskedMatVec { .. } => "masked_matvec",
            Op::ConstMatVec { .. } => "const_matvec",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Elu(_) => "elu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::Gather { .. } => "gather",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Append-only record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a vector-valued node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    len: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("len", &self.len).finish()
    }
}

/// Adjoints produced by a backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the differentiated output w.r.t. `var`; zeros if `var` does
    /// not influence the output.
    pub fn wrt(&self, var: Var<'_>) -> Vec<f64> {
        self.adjoints[var.id].clone().unwrap_or_else(|| vec![0.0; var.len])
    }
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|i| m[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn masked_matvec(m: &[f64], mask: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            let r = i * cols..(i + 1) * cols;
            m[r.clone()].iter().zip(&mask[r]).zip(x).map(|((a, k), b)| a * k * b).sum()
        })
        .collect()
}

/// `out += mᵀ g` (optionally with `m` masked elementwise).
fn matvec_transpose_acc(m: &[f64], mask: Option<&[f64]>, cols: usize, g: &[f64], out: &mut [f64]) {
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let row = &m[i * cols..(i + 1) * cols];
        match mask {
            Some(mask) => {
                let mrow = &mask[i * cols..(i + 1) * cols];
                for ((o, a), k) in out.iter_mut().zip(row).zip(mrow) {
                    *o += gi * a * k;
                }
            }
            None => {
                for (o, a) in out.iter_mut().zip(row) {
                    *o += gi * a;
                }
            }
        }
    }
}

/// `out += g xᵀ` (optionally masked), flattened row-major.
fn outer_acc(g: &[f64], x: &[f64], mask: Option<&[f64]>, out: &mut [f64]) {
    let cols = x.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let orow = &mut out[i * cols..(i + 1) * cols];
        match mask {
            Some(mask) => {
                for ((o, xj), k) in orow.iter_mut().zip(x).zip(&mask[i * cols..(i + 1) * cols]) {
                    *o += gi * xj * k;
                }
            }
            None => {
                for (o, xj) in orow.iter_mut().zip(x) {
                    *o += gi * xj;
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let len = value.len();
        nodes.push(Node { op, value, requires_grad });
        Var { tape: self, id, len }
    }

    /// Differentiable input.
    pub fn var(&self, value: Vec<f64>) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Input that gradients are not propagated to.
    pub fn constant(&self, value: Vec<f64>) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(vec![value])
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let nodes = self.nodes.borrow();
        let mut value = Vec::with_capacity(parts.iter().map(|p| p.len).sum());
        for p in parts {
            assert!(std::ptr::eq(p.tape, self), "concat across tapes");
            value.extend_from_slice(&nodes[p.id].value);
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), value, rg)
    }

    /// Index of the first node holding a non-finite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.borrow().iter().enumerate().find(|(_, n)| n.value.iter().any(|v| !v.is_finite())).map(|(i, n)| (i, n.op.name()))
    }

    /// Seed `output` (a scalar) with adjoint 1 and propagate backwards.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert_eq!(output.len, 1, "backward requires a scalar output");
        self.backward_seeded(output, 1.0)
    }

    pub fn backward_seeded(&self, output: Var<'_>, seed: f64) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        adj[output.id] = Some(vec![seed; output.len]);
        for id in (0..=output.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                self.propagate(&nodes, node, &g, &mut adj);
            }
            adj[id] = Some(g);
        }
        Gradients { adjoints: adj }
    }

    fn propagate(&self, nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let rg = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| nodes[i].value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if rg(i) {
                        accumulate(&mut adj[i], g.len(), |o| o.iter_mut().zip(g).for_each(|(o, g)| *o += g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(&mut adj[*a], g.len(), |o| o.iter_mut().zip(g).for_each(|(o, g)| *o += g));
                }
                if rg(*b) {
                    accumulate(&mut adj[*b], g.len(), |o| o.iter_mut().zip(g).for_each(|(o, g)| *o -= g));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let vb = val(*b);
                    accumulate(&mut adj[*a], g.len(), |o| {
                        for ((o, g), y) in o.iter_mut().zip(g).zip(vb) {
                            *o += g * y;
                        }
                    });
                }
                if rg(*b) {
                    let va = val(*a);
                    accumulate(&mut adj[*b], g.len(), |o| {
                        for ((o, g), x) in o.iter_mut().zip(g).zip(va) {
                            *o += g * x;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    accumulate(&mut adj[*a], g.len(), |o| o.iter_mut().zip(g).for_each(|(o, g)| *o += c * g));
                }
            }
            Op::Offset(a) => {
                if rg(*a) {
                    accumulate(&mut adj[*a], g.len(), |o| o.iter_mut().zip(g).for_each(|(o, g)| *o += g));
                }
            }
            Op::MatVec { m, x, rows, cols } => {
                if rg(*m) {
                    accumulate(&mut adj[*m], rows * cols, |o| outer_acc(g, val(*x), None, o));
                }
                if rg(*x) {
                    accumulate(&mut adj[*x], *cols, |o| matvec_transpose_acc(val(*m), None, *cols, g, o));
                }
            }
            Op::MaskedMatVec { m, mask, x, rows, cols } => {
                if rg(*m) {
                    accumulate(&mut adj[*m], rows * cols, |o| outer_acc(g, val(*x), Some(mask), o));
                }
                if rg(*x) {
                    accumulate(&mut adj[*x], *cols, |o| matvec_transpose_acc(val(*m), Some(mask), *cols, g, o));
                }
            }
            Op::ConstMatVec { m, x } => {
                if rg(*x) {
                    accumulate(&mut adj[*x], m.cols, |o| matvec_transpose_acc(&m.data, None, m.cols, g, o));
                }
            }
            Op::Exp(a) => self.unary_adjoint(nodes, *a, g, adj, |_, y| y, &node.value),
            Op::Log(a) => self.unary_adjoint(nodes, *a, g, adj, |x, _| 1.0 / x, &node.value),
            Op::Elu(a) => self.unary_adjoint(nodes, *a, g, adj, |x, y| if x >= 0.0 { 1.0 } else { y + 1.0 }, &node.value),
            Op::Softplus(a) => self.unary_adjoint(nodes, *a, g, adj, |x, _| sigmoid(x), &node.value),
            Op::Sigmoid(a) => self.unary_adjoint(nodes, *a, g, adj, |_, y| y * (1.0 - y), &node.value),
            Op::Square(a) => self.unary_adjoint(nodes, *a, g, adj, |x, _| 2.0 * x, &node.value),
            Op::Clamp { x, lo, hi } => {
                self.unary_adjoint(nodes, *x, g, adj, |x, _| if x < *lo || x > *hi { 0.0 } else { 1.0 }, &node.value)
            }
            Op::Sum(a) => {
                if rg(*a) {
                    let n = nodes[*a].value.len();
                    accumulate(&mut adj[*a], n, |o| o.iter_mut().for_each(|o| *o += g[0]));
                }
            }
            Op::Slice { x, start } => {
                if rg(*x) {
                    let n = nodes[*x].value.len();
                    accumulate(&mut adj[*x], n, |o| o[*start..*start + g.len()].iter_mut().zip(g).for_each(|(o, g)| *o += g));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p].value.len();
                    if rg(p) {
                        accumulate(&mut adj[p], n, |o| o.iter_mut().zip(&g[offset..offset + n]).for_each(|(o, g)| *o += g));
                    }
                    offset += n;
                }
            }
            Op::Gather { x, index } => {
                if rg(*x) {
                    let n = nodes[*x].value.len();
                    accumulate(&mut adj[*x], n, |o| {
                        for (&i, g) in index.iter().zip(g) {
                            o[i] += g;
                        }
                    });
                }
            }
        }
    }

    fn unary_adjoint(
        &self,
        nodes: &[Node],
        input: usize,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        local: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        if !nodes[input].requires_grad {
            return;
        }
        let x = &nodes[input].value;
        accumulate(&mut adj[input], g.len(), |o| {
            for (((o, g), &x), &y) in o.iter_mut().zip(g).zip(x).zip(out) {
                *o += g * local(x, y);
            }
        });
    }
}

impl<'t> Var<'t> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a length-1 variable.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len, 1, "item() on a vector of length {}", self.len);
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables live on different tapes");
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value: Vec<f64> = self.tape.nodes.borrow()[self.id].value.iter().map(|&x| f(x)).collect();
        self.tape.push(op, value, self.requires_grad())
    }

    fn zip(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&other);
        assert_eq!(self.len, other.len, "shape mismatch in `{}`: {} vs {}", op.name(), self.len, other.len);
        let nodes = self.tape.nodes.borrow();
        let value = nodes[self.id].value.iter().zip(&nodes[other.id].value).map(|(&a, &b)| f(a, b)).collect();
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        drop(nodes);
        self.tape.push(op, value, rg)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds the constant `c` to every element.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.map(Op::Offset(self.id), |x| x + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.map(Op::Log(self.id), f64::ln)
    }

    /// Exponential linear unit with α = 1.
    pub fn elu(self) -> Var<'t> {
        self.map(Op::Elu(self.id), elu)
    }

    pub fn softplus(self) -> Var<'t> {
        self.map(Op::Softplus(self.id), softplus)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid(self.id), sigmoid)
    }

    /// `log σ(x) = −softplus(−x)`.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.neg().softplus().neg()
    }

    pub fn square(self) -> Var<'t> {
        self.map(Op::Square(self.id), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; the adjoint is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.map(Op::Clamp { x: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.tape.nodes.borrow()[self.id].value.iter().sum();
        self.tape.push(Op::Sum(self.id), vec![s], self.requires_grad())
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        self.mul(other).sum()
    }

    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        assert!(start + len <= self.len, "slice {start}..{} out of range for length {}", start + len, self.len);
        let value = self.tape.nodes.borrow()[self.id].value[start..start + len].to_vec();
        self.tape.push(Op::Slice { x: self.id, start }, value, self.requires_grad())
    }

    /// `out[k] = self[index[k]]`. Indices may repeat, which makes this double as
    /// a broadcast.
    pub fn gather(self, index: impl Into<Arc<[usize]>>) -> Var<'t> {
        let index = index.into();
        let nodes = self.tape.nodes.borrow();
        let src = &nodes[self.id].value;
        let value = index
            .iter()
            .map(|&i| {
                assert!(i < self.len, "gather index {i} out of range for length {}", self.len);
                src[i]
            })
            .collect();
        let rg = nodes[self.id].requires_grad;
        drop(nodes);
        self.tape.push(Op::Gather { x: self.id, index }, value, rg)
    }

    /// Reverses element order.
    pub fn reverse(self) -> Var<'t> {
        let index: Vec<usize> = (0..self.len).rev().collect();
        self.gather(index)
    }

    /// Repeats a length-1 variable `n` times.
    pub fn broadcast(self, n: usize) -> Var<'t> {
        assert_eq!(self.len, 1, "broadcast needs a scalar");
        self.gather(vec![0; n])
    }

    /// `self` is a `rows × cols` row-major matrix; returns `self · x`.
    pub fn matvec(self, rows: usize, cols: usize, x: Var<'t>) -> Var<'t> {
        self.same_tape(&x);
        assert_eq!(self.len, rows * cols, "matvec: matrix length {} is not {rows}x{cols}", self.len);
        assert_eq!(x.len, cols, "matvec: vector length {} does not match {cols} columns", x.len);
        let nodes = self.tape.nodes.borrow();
        let value = matvec(&nodes[self.id].value, rows, cols, &nodes[x.id].value);
        let rg = nodes[self.id].requires_grad || nodes[x.id].requires_grad;
        drop(nodes);
        self.tape.push(Op::MatVec { m: self.id, x: x.id, rows, cols }, value, rg)
    }

    /// Like [`Var::matvec`], with the weight matrix multiplied elementwise by a
    /// fixed 0/1 `mask` before use.
    pub fn masked_matvec(self, mask: &Arc<[f64]>, rows: usize, cols: usize, x: Var<'t>) -> Var<'t> {
        self.same_tape(&x);
        assert_eq!(self.len, rows * cols, "masked_matvec: matrix length {} is not {rows}x{cols}", self.len);
        assert_eq!(mask.len(), rows * cols, "masked_matvec: mask shape mismatch");
        assert_eq!(x.len, cols, "masked_matvec: vector length {} does not match {cols} columns", x.len);
        let nodes = self.tape.nodes.borrow();
        let value = masked_matvec(&nodes[self.id].value, mask, rows, cols, &nodes[x.id].value);
        let rg = nodes[self.id].requires_grad || nodes[x.id].requires_grad;
        drop(nodes);
        let op = Op::MaskedMatVec { m: self.id, mask: Arc::clone(mask), x: x.id, rows, cols };
        self.tape.push(op, value, rg)
    }

    /// `m · self` for a constant matrix.
    pub fn left_mul(self, m: &ConstMatrix) -> Var<'t> {
        assert_eq!(self.len, m.cols, "left_mul: vector length {} does not match {} columns", self.len, m.cols);
        let value = {
            let nodes = self.tape.nodes.borrow();
            m.mul_vec(&nodes[self.id].value)
        };
        self.tape.push(Op::ConstMatVec { m: m.clone(), x: self.id }, value, self.requires_grad())
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

/// Value and gradient of the scalar program `f` at `x`.
pub fn gradient<F>(f: F, x: &[f64]) -> Result<(f64, Vec<f64>), AutodiffError>
where
    F: for<'t> FnOnce(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let input = tape.var(x.to_vec());
    let out = f(&tape, input);
    if out.len() != 1 {
        return Err(AutodiffError::NotScalar(out.len()));
    }
    let value = out.item();
    if !value.is_finite() {
        let (node, op) = tape.first_non_finite().unwrap_or((out.id(), "unknown"));
        return Err(AutodiffError::NonFinite { op, node });
    }
    let grads = tape.backward(out);
    Ok((value, grads.wrt(input)))
}

/// Value of the scalar program `f` at `x`, without a backward pass.
pub fn evaluate<F>(f: F, x: &[f64]) -> f64
where
    F: for<'t> FnOnce(&'t Tape, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let input = tape.constant(x.to_vec());
    f(&tape, input).item()
}
