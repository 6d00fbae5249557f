//! Dense `f64` tensors and a define-by-run tape for reverse-mode
//! differentiation.
//!
//! A [`Graph`] is built fresh for every example. Parameters enter the graph
//! as borrowed leaves via [`Graph::leaf`]; every other node owns its value.
//! [`Graph::backward`] returns a [`Gradients`] table indexed by [`Var`] which
//! callers fold into their parameter tensors with [`Tensor::accumulate_grad`].
//! Shapes never broadcast.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Transpose(Var),
    TileRows(Var),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    CrossEntropy(Var, usize),
    Sum(Var),
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation record. Inputs always precede the nodes using them.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrows a tensor as a leaf. Gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: Cow::Borrowed(&t.data),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(vec![n], data, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bpj) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `w[m×k] · x[k] -> [m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (self.shape(w), self.shape(x));
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::Shape(format!("matvec of {sw:?} and {sx:?}")));
        }
        let (m, k) = (sw[0], sw[1]);
        let (wv, xv) = (self.value(w), self.value(x));
        let out = (0..m)
            .map(|i| {
                wv[i * k..(i + 1) * k]
                    .iter()
                    .zip(xv.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.rg(&[w, x]);
        Ok(self.push(vec![m], out, Op::MatVec(w, x), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("add_n of nothing".into()))?;
        for &x in &xs[1..] {
            self.same_shape(first, x, "add_n")?;
        }
        let mut out = self.value(first).to_vec();
        for &x in &xs[1..] {
            out.iter_mut().zip(self.value(x)).for_each(|(o, v)| *o += v);
        }
        let shape = self.shape(first).to_vec();
        let rg = self.rg(xs);
        Ok(self.push(shape, out, Op::AddN(xs.to_vec()), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// Concatenation along the last axis. Leading dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!(
                    "concat of {:?} and {:?}",
                    self.shape(first),
                    s
                )));
            }
        }
        let rows = numel(&lead);
        let widths: Vec<usize> = xs.iter().map(|&x| last_dim(self.shape(x))).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(xs);
        Ok(self.push(shape, out, Op::Concat(xs.to_vec()), rg))
    }

    /// Elements `start..end` along the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let w = last_dim(&s);
        if s.is_empty() || start > end || end > w {
            return Err(Error::Shape(format!("slice {start}..{end} of {s:?}")));
        }
        let rows = self.value(a).len() / w.max(1);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a)[r * w + start..r * w + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Slice(a, start, end), rg))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of nothing".into()))?;
        let s = self.shape(first).to_vec();
        if s.len() != 1 {
            return Err(Error::Shape(format!("stack_rows of {s:?}")));
        }
        for &x in xs {
            self.same_shape(first, x, "stack_rows")?;
        }
        let mut out = Vec::with_capacity(xs.len() * s[0]);
        for &x in xs {
            out.extend_from_slice(self.value(x));
        }
        let rg = self.rg(xs);
        Ok(self.push(vec![xs.len(), s[0]], out, Op::StackRows(xs.to_vec()), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("row of {s:?}")));
        }
        if i >= s[0] {
            return Err(Error::Index(format!("row {i} of a {}-row matrix", s[0])));
        }
        let out = self.value(a)[i * s[1]..(i + 1) * s[1]].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![s[1]], out, Op::Row(a, i), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose of {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    /// Repeats a vector `[d]` as `rows` rows of a `[rows×d]` matrix.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 1 {
            return Err(Error::Shape(format!("tile_rows of {s:?}")));
        }
        let out = self.value(a).repeat(rows);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![rows, s[0]], out, Op::TileRows(a), rg))
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::Shape(format!("softmax of {s:?}")));
        }
        let out = softmax_values(self.value(a));
        let rg = self.rg(&[a]);
        Ok(self.push(s, out, Op::Softmax(a), rg))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("gather_rows from {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "row {bad} of a table with {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    /// Inverted dropout. Identity when not training or when `rate` is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Dropout(a, mask), rg))
    }

    /// `-ln(max(probs[target], 1e-12))` as a scalar node.
    pub fn cross_entropy(&mut self, probs: Var, target: usize) -> Result<Var> {
        let s = self.shape(probs);
        if s.len() != 1 {
            return Err(Error::Shape(format!("cross_entropy over {s:?}")));
        }
        if target >= s[0] {
            return Err(Error::Index(format!(
                "target {target} outside distribution of size {}",
                s[0]
            )));
        }
        let p = self.value(probs)[target];
        // NaN must survive the floor so divergence stays visible
        let p = if p.is_nan() { p } else { p.max(PROB_FLOOR) };
        let rg = self.rg(&[probs]);
        Ok(self.push(vec![], vec![-p.ln()], Op::CrossEntropy(probs, target), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![total], Op::Sum(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let input = &self.nodes[v.0];
            if input.requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; input.value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for (o, gij) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += aip * gij;
                            }
                        }
                    }
                });
            }
            Op::MatVec(w, x) => {
                let k = self.shape(*w)[1];
                let (wv, xv) = (self.value(*w), self.value(*x));
                acc(*w, &mut |gw| {
                    for (i, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (o, xp) in gw[i * k..(i + 1) * k].iter_mut().zip(xv) {
                            *o += gi * xp;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        for (o, wip) in gx.iter_mut().zip(&wv[i * k..(i + 1) * k]) {
                            *o += gi * wip;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddN(xs) => {
                for x in xs {
                    acc(*x, &mut |gx| add_into(gx, g));
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x)
            }),
            Op::Concat(xs) => {
                let total = last_dim(&node.shape);
                let rows = node.value.len() / total.max(1);
                let mut offset = 0;
                for x in xs {
                    let w = last_dim(self.shape(*x));
                    acc(*x, &mut |gx| {
                        for r in 0..rows {
                            add_into(
                                &mut gx[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice(a, start, end) => {
                let w = last_dim(self.shape(*a));
                let width = end - start;
                let rows = node.value.len() / width.max(1);
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        add_into(
                            &mut ga[r * w + start..r * w + end],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::StackRows(xs) => {
                let d = node.shape[1];
                for (r, x) in xs.iter().enumerate() {
                    acc(*x, &mut |gx| add_into(gx, &g[r * d..(r + 1) * d]));
                }
            }
            Op::Row(a, i) => {
                let d = node.shape[0];
                acc(*a, &mut |ga| add_into(&mut ga[i * d..(i + 1) * d], g));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::TileRows(a) => {
                let d = self.shape(*a)[0];
                acc(*a, &mut |ga| {
                    for row in g.chunks(d.max(1)) {
                        add_into(ga, row);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let dot: f64 = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                acc(*a, &mut |ga| {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *o += yi * (gi - dot);
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Dropout(a, mask) => acc(*a, &mut |ga| {
                for ((o, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }),
            Op::CrossEntropy(probs, target) => {
                let p = self.value(*probs)[*target];
                if p > PROB_FLOOR {
                    acc(*probs, &mut |gp| gp[*target] -= g[0] / p);
                }
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Numerically stable softmax on plain values.
pub fn softmax_values(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when no gradient reached `v`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
