//! Reverse-mode differentiation over scalar expression graphs.
//!
//! A [`Tape`] is an append-only Wengert list. Every arithmetic operation on a
//! [`Var`] pushes one node holding its primal value and the local partial
//! derivative with respect to each parent. A single reverse sweep over the
//! list then accumulates adjoints.
//!
//! Constants never touch the tape unless they are mixed into an n-ary node
//! ([`Real::sum`], [`Real::dot`]), so `Var::constant(2.0) * x` costs one node.
//!
//! ```
//! use mortvi::tape::{gradient, Real};
//!
//! let (value, grad) = gradient(&[3.0], |x| Ok(x[0] * x[0])).unwrap();
//! assert_eq!(value, 9.0);
//! assert_eq!(grad, vec![6.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Primitive operations recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    /// `scale * x + shift` with constant coefficients.
    Affine { scale: f64, shift: f64 },
    Exp,
    Ln,
    /// `x^p` for a constant exponent.
    Powf(f64),
    /// Reduction sum over all parents.
    Sum,
    /// Inner product; parents are interleaved `a0, b0, a1, b1, ...`.
    Dot,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Leaf => f.write_str("leaf"),
            Op::Const => f.write_str("const"),
            Op::Add => f.write_str("add"),
            Op::Sub => f.write_str("sub"),
            Op::Mul => f.write_str("mul"),
            Op::Div => f.write_str("div"),
            Op::Affine { scale, shift } => write!(f, "affine({scale}, {shift})"),
            Op::Exp => f.write_str("exp"),
            Op::Ln => f.write_str("ln"),
            Op::Powf(p) => write!(f, "powf({p})"),
            Op::Sum => f.write_str("sum"),
            Op::Dot => f.write_str("dot"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    op: Op,
    value: f64,
    start: u32,
    end: u32,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    parent: u32,
    partial: f64,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

/// Computes the primal value of a node from its parents' values.
///
/// Shared by recording and replay so the two agree bit for bit.
fn evaluate(op: Op, edges: &[Edge], value_of: impl Fn(u32) -> f64) -> f64 {
    let v = |i: usize| value_of(edges[i].parent);
    match op {
        Op::Leaf | Op::Const => unreachable!("leaves carry their own value"),
        Op::Add => v(0) + v(1),
        Op::Sub => v(0) - v(1),
        Op::Mul => v(0) * v(1),
        Op::Div => v(0) / v(1),
        Op::Affine { scale, shift } => scale * v(0) + shift,
        Op::Exp => v(0).exp(),
        Op::Ln => v(0).ln(),
        Op::Powf(p) => v(0).powf(p),
        Op::Sum => edges.iter().map(|e| value_of(e.parent)).sum(),
        Op::Dot => edges.chunks_exact(2).map(|p| value_of(p[0].parent) * value_of(p[1].parent)).sum(),
    }
}

/// Local partials of a node given its parents' values and its own value.
fn fill_partials(op: Op, edges: &mut [Edge], value_of: impl Fn(u32) -> f64, out: f64) {
    let v = |edges: &[Edge], i: usize| value_of(edges[i].parent);
    match op {
        Op::Leaf | Op::Const => {}
        Op::Add => {
            edges[0].partial = 1.0;
            edges[1].partial = 1.0;
        }
        Op::Sub => {
            edges[0].partial = 1.0;
            edges[1].partial = -1.0;
        }
        Op::Mul => {
            let (a, b) = (v(edges, 0), v(edges, 1));
            edges[0].partial = b;
            edges[1].partial = a;
        }
        Op::Div => {
            let (a, b) = (v(edges, 0), v(edges, 1));
            edges[0].partial = 1.0 / b;
            edges[1].partial = -a / (b * b);
        }
        Op::Affine { scale, .. } => edges[0].partial = scale,
        Op::Exp => edges[0].partial = out,
        Op::Ln => edges[0].partial = 1.0 / v(edges, 0),
        Op::Powf(p) => edges[0].partial = p * v(edges, 0).powf(p - 1.0),
        Op::Sum => edges.iter_mut().for_each(|e| e.partial = 1.0),
        Op::Dot => {
            for i in (0..edges.len()).step_by(2) {
                let (a, b) = (v(edges, i), v(edges, i + 1));
                edges[i].partial = b;
                edges[i + 1].partial = a;
            }
        }
    }
}

/// Append-only record of one scalar computation.
///
/// A tape is single-threaded (it uses interior mutability); separate tapes are
/// independent and can live on separate threads.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::with_capacity(nodes),
                edges: Vec::with_capacity(2 * nodes),
            }),
        }
    }

    /// Registers an independent variable.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let idx = self.push_source(Op::Leaf, value);
        Var { tape: Some(self), idx, value }
    }

    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Recorded primal values, in node order.
    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().nodes.iter().map(|n| n.value).collect()
    }

    /// Recomputes every primal value from the leaves and the recorded ops.
    pub fn replay(&self) -> Vec<f64> {
        let inner = self.inner.borrow();
        let mut values = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            let value = match node.op {
                Op::Leaf | Op::Const => node.value,
                op => evaluate(op, &inner.edges[node.start as usize..node.end as usize], |p| {
                    values[p as usize]
                }),
            };
            values.push(value);
        }
        values
    }

    /// Returns the first node whose primal value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        let inner = self.inner.borrow();
        match inner.nodes.iter().position(|n| !n.value.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                node: i,
                op: inner.nodes[i].op.to_string(),
                value: inner.nodes[i].value,
            }),
        }
    }

    /// Reverse sweep from `root`, returning the adjoint of every node.
    pub fn backward(&self, root: Var<'_>) -> Adjoints {
        let inner = self.inner.borrow();
        let mut adj = vec![0.0; inner.nodes.len()];
        let Some(root_idx) = root.node_index() else {
            return Adjoints { adj };
        };
        adj[root_idx] = 1.0;
        for i in (0..=root_idx).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            for e in &inner.edges[node.start as usize..node.end as usize] {
                adj[e.parent as usize] += a * e.partial;
            }
        }
        Adjoints { adj }
    }

    fn push_source(&self, op: Op, value: f64) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len() as u32;
        let start = inner.edges.len() as u32;
        inner.nodes.push(Node { op, value, start, end: start });
        idx
    }

    fn push(&self, op: Op, parents: &[u32]) -> Var<'_> {
        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        let start = inner.edges.len();
        inner.edges.extend(parents.iter().map(|&parent| Edge { parent, partial: 0.0 }));
        let end = inner.edges.len();
        let nodes = &inner.nodes;
        let edges = &mut inner.edges[start..end];
        let value = evaluate(op, edges, |p| nodes[p as usize].value);
        fill_partials(op, edges, |p| nodes[p as usize].value, value);
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node { op, value, start: start as u32, end: end as u32 });
        Var { tape: Some(self), idx, value }
    }

    /// Puts a constant on the tape so it can join an n-ary node.
    fn materialize<'t>(&'t self, v: Var<'t>) -> u32 {
        match v.tape {
            Some(_) => v.idx,
            None => self.push_source(Op::Const, v.value),
        }
    }
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Adjoints {
    adj: Vec<f64>,
}

impl Adjoints {
    /// ∂root/∂v. Constants have no adjoint and report zero.
    pub fn wrt(&self, v: &Var<'_>) -> f64 {
        v.node_index().and_then(|i| self.adj.get(i).copied()).unwrap_or(0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.adj
    }
}

/// A scalar that is either a constant or a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var(#{} = {})", self.idx, self.value),
            None => write!(f, "Const({})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(value: f64) -> Self {
        Var { tape: None, idx: 0, value }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    fn node_index(&self) -> Option<usize> {
        self.tape.map(|_| self.idx as usize)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Self {
        match self.tape {
            None => Var::constant(f(self.value)),
            Some(tape) => tape.push(op, &[self.idx]),
        }
    }

    fn affine(self, scale: f64, shift: f64) -> Self {
        self.unary(Op::Affine { scale, shift }, |x| scale * x + shift)
    }

    fn binary(self, rhs: Self, op: Op, f: impl Fn(f64, f64) -> f64) -> Self {
        match (self.tape, rhs.tape) {
            (None, None) => Var::constant(f(self.value, rhs.value)),
            (Some(tape), _) | (None, Some(tape)) => {
                debug_assert!(
                    rhs.tape.is_none_or(|t| std::ptr::eq(t, tape))
                        && self.tape.is_none_or(|t| std::ptr::eq(t, tape)),
                    "operands recorded on different tapes"
                );
                let a = tape.materialize(self);
                let b = tape.materialize(rhs);
                tape.push(op, &[a, b])
            }
        }
    }

    fn tape_of(xs: &[Var<'t>]) -> Option<&'t Tape> {
        xs.iter().find_map(|x| x.tape)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        match (self.tape, rhs.tape) {
            (Some(_), None) => self.affine(1.0, rhs.value),
            (None, Some(_)) => rhs.affine(1.0, self.value),
            _ => self.binary(rhs, Op::Add, |a, b| a + b),
        }
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        match (self.tape, rhs.tape) {
            (Some(_), None) => self.affine(1.0, -rhs.value),
            (None, Some(_)) => rhs.affine(-1.0, self.value),
            _ => self.binary(rhs, Op::Sub, |a, b| a - b),
        }
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        match (self.tape, rhs.tape) {
            (Some(_), None) => self.affine(rhs.value, 0.0),
            (None, Some(_)) => rhs.affine(self.value, 0.0),
            _ => self.binary(rhs, Op::Mul, |a, b| a * b),
        }
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        match (self.tape, rhs.tape) {
            (Some(_), None) => self.affine(1.0 / rhs.value, 0.0),
            (None, Some(_)) => rhs.powf(-1.0).affine(self.value, 0.0),
            _ => self.binary(rhs, Op::Div, |a, b| a / b),
        }
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.affine(-1.0, 0.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.affine(1.0, rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.affine(1.0, -rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.affine(rhs, 0.0)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.affine(1.0 / rhs, 0.0)
    }
}

/// Scalar arithmetic shared by plain `f64` evaluation and taped [`Var`]s.
///
/// Model densities are written once against this trait: instantiated with
/// `f64` they evaluate, instantiated with `Var` they record a gradient tape.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn sum(xs: &[Self]) -> Self;
    fn dot(a: &[Self], b: &[Self]) -> Self;

    fn square(self) -> Self {
        self * self
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self {
        if self.value() > 0.0 {
            self + ((-self).exp() + 1.0).ln()
        } else {
            (self.exp() + 1.0).ln()
        }
    }

    /// `1 / (1 + e^-x)`, evaluated without overflow.
    fn logistic(self) -> Self {
        if self.value() >= 0.0 {
            ((-self).exp() + 1.0).powf(-1.0)
        } else {
            let e = self.exp();
            e * (e + 1.0).powf(-1.0)
        }
    }
}

impl Real for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len(), "dot product of unequal lengths");
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

impl<'t> Real for Var<'t> {
    fn constant(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        self.unary(Op::Exp, f64::exp)
    }
    fn ln(self) -> Self {
        self.unary(Op::Ln, f64::ln)
    }
    fn powf(self, p: f64) -> Self {
        self.unary(Op::Powf(p), |x| x.powf(p))
    }
    fn sum(xs: &[Self]) -> Self {
        match Var::tape_of(xs) {
            None => Var::constant(xs.iter().map(|x| x.value).sum()),
            Some(tape) => {
                let parents: Vec<u32> = xs.iter().map(|&x| tape.materialize(x)).collect();
                tape.push(Op::Sum, &parents)
            }
        }
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        assert_eq!(a.len(), b.len(), "dot product of unequal lengths");
        let tape = Var::tape_of(a).or_else(|| Var::tape_of(b));
        match tape {
            None => Var::constant(a.iter().zip(b).map(|(x, y)| x.value * y.value).sum()),
            Some(tape) => {
                let mut parents = Vec::with_capacity(2 * a.len());
                for (&x, &y) in a.iter().zip(b) {
                    parents.push(tape.materialize(x));
                    parents.push(tape.materialize(y));
                }
                tape.push(Op::Dot, &parents)
            }
        }
    }
}

/// Matrix-vector product for a row-major `rows × x.len()` matrix.
pub fn matvec<R: Real>(matrix: &[R], x: &[R]) -> Vec<R> {
    let cols = x.len();
    if cols == 0 {
        return vec![R::constant(0.0); if matrix.is_empty() { 0 } else { matrix.len() }];
    }
    assert_eq!(matrix.len() % cols, 0, "matrix size is not a multiple of the vector length");
    matrix.chunks_exact(cols).map(|row| R::dot(row, x)).collect()
}

/// Evaluates `f` at `point` and returns the value together with ∂f/∂point.
///
/// Fails if any recorded primal is non-finite, naming the first such node.
pub fn gradient<F>(point: &[f64], f: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> FnOnce(&[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves = tape.leaves(point);
    let root = f(&leaves)?;
    tape.check_finite()?;
    if !root.value.is_finite() {
        return Err(Error::NonFinite { node: usize::MAX, op: "root".into(), value: root.value });
    }
    let adj = tape.backward(root);
    Ok((root.value, leaves.iter().map(|l| adj.wrt(l)).collect()))
}
