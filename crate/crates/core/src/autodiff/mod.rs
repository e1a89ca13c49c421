//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as it executes. Nodes are appended in
//! evaluation order, so the tape itself is a topological order and
//! [`Tape::backward`] is a single reverse sweep. Build a fresh tape (or call
//! [`Tape::clear`]) for each batch.

mod conv;
pub mod gradcheck;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, BroadcastPlan, Tensor};

pub use gradcheck::{grad_check, grad_check_coords};

/// Smallest argument `log` accepts.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Conv2d,
    Relu,
    Log,
    Exp,
    Sum,
    Mean,
    SumLast,
    MeanLast,
    MaxLast,
    Broadcast,
    Reshape,
    Scale,
    DivScalar,
    Softmax,
    LogSoftmax,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanLast(Var),
    MaxLast {
        src: Var,
        argmax: Vec<usize>,
    },
    Broadcast(Var),
    Reshape(Var),
    Scale(Var, T),
    DivScalar(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Log(_) => OpKind::Log,
            Op::Exp(_) => OpKind::Exp,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumLast(_) => OpKind::SumLast,
            Op::MeanLast(_) => OpKind::MeanLast,
            Op::MaxLast { .. } => OpKind::MaxLast,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Scale(..) => OpKind::Scale,
            Op::DivScalar(..) => OpKind::DivScalar,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) | Op::DivScalar(a, b) => {
                vec![a, b]
            }
            Op::Conv2d { input, weight, .. } => vec![input, weight],
            Op::Relu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::MeanLast(a)
            | Op::Broadcast(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a) => vec![a],
            Op::MaxLast { src, .. } => vec![src],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the node does not influence the root (zero gradient).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with unreachable nodes materialized as zeros.
    pub fn dense(&self, v: Var) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / n;
    (rows, n)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or point of differentiation).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape =
            broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, &[sa, sb], "shapes do not broadcast"))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(out_shape, data));
        }
        let numel = out_shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        BroadcastPlan::new(&out_shape, &[sa, sb]).for_each_run(|_, offs, st, len| {
            let (ia, ib) = (offs[0], offs[1]);
            match (st[0], st[1]) {
                (1, 1) => data.extend(va[ia..ia + len].iter().zip(&vb[ib..ib + len]).map(|(&x, &y)| f(x, y))),
                (1, 0) => {
                    let y = vb[ib];
                    data.extend(va[ia..ia + len].iter().map(|&x| f(x, y)));
                }
                (0, 1) => {
                    let x = va[ia];
                    data.extend(vb[ib..ib + len].iter().map(|&y| f(x, y)));
                }
                _ => data.extend(std::iter::repeat_n(f(va[ia], vb[ib]), len)),
            }
        });
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Elementwise quotient with broadcasting; a zero divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|d| d.is_zero()) {
            return Err(Error::domain("div", "division by zero"));
        }
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v))
    }

    /// Divides every element of `a` by the one-element node `denom`.
    pub fn div_scalar(&mut self, a: Var, denom: Var) -> Result<Var> {
        let d = self.value(denom);
        if d.len() != 1 {
            return Err(Error::shape(
                "div_scalar",
                &[self.shape(a), d.shape()],
                "divisor must hold exactly one value",
            ));
        }
        let d = d.data()[0];
        if d.is_zero() {
            return Err(Error::domain("div_scalar", "division by zero"));
        }
        let v = self.value(a).map(|x| x / d);
        Ok(self.push(Op::DivScalar(a, denom), v))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * factor);
        Ok(self.push(Op::Scale(a, factor), v))
    }

    /// `(m×k)·(k×n)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb], "expected (m×k)·(k×n)"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        Ok(self.push(Op::Matmul(a, b), Tensor::from_parts(vec![m, n], out)))
    }

    /// Zero-padded 2-D cross-correlation of an NCHW input with an
    /// `OC×C×KH×KW` kernel, no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = conv::forward(self.value(input), self.value(weight), stride, pad)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
            v,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        Ok(self.push(Op::Relu(a), v))
    }

    /// Natural log. Inputs below [`LOG_FLOOR`] are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let floor = T::of(LOG_FLOOR);
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x >= floor)) {
            return Err(Error::domain("log", format!("argument {bad} below {LOG_FLOOR}")));
        }
        let v = self.value(a).map(T::ln);
        Ok(self.push(Op::Log(a), v))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::exp);
        if !v.all_finite() {
            return Err(Error::domain("exp", "result overflows"));
        }
        Ok(self.push(Op::Exp(a), v))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.len() as f64);
        Ok(self.push(Op::Mean(a), Tensor::scalar(m)))
    }

    fn reduce_last(&self, a: Var, name: &'static str) -> Result<(Vec<usize>, usize, usize)> {
        let shape = self.shape(a);
        if shape.is_empty() {
            return Err(Error::shape(name, &[shape], "needs at least one axis"));
        }
        let (rows, n) = last_axis(shape);
        let mut out = shape[..shape.len() - 1].to_vec();
        if out.is_empty() {
            out = Vec::new();
        }
        Ok((out, rows, n))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (shape, rows, n) = self.reduce_last(a, "sum_last")?;
        let d = self.value(a).data();
        let data = (0..rows).map(|r| d[r * n..(r + 1) * n].iter().copied().sum()).collect();
        Ok(self.push(Op::SumLast(a), Tensor::from_parts(shape, data)))
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let (shape, rows, n) = self.reduce_last(a, "mean_last")?;
        let d = self.value(a).data();
        let inv = T::of(n as f64);
        let data = (0..rows)
            .map(|r| d[r * n..(r + 1) * n].iter().copied().sum::<T>() / inv)
            .collect();
        Ok(self.push(Op::MeanLast(a), Tensor::from_parts(shape, data)))
    }

    /// Maximum over the last axis; ties route the gradient to the first maximum.
    pub fn max_last(&mut self, a: Var) -> Result<Var> {
        let (shape, rows, n) = self.reduce_last(a, "max_last")?;
        let d = self.value(a).data();
        let mut argmax = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            argmax.push(r * n + best);
            data.push(row[best]);
        }
        Ok(self.push(Op::MaxLast { src: a, argmax }, Tensor::from_parts(shape, data)))
    }

    /// Materializes `a` broadcast to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if broadcast_shape(sa, shape).as_deref() != Some(shape) {
            return Err(Error::shape("broadcast", &[sa, shape], "not broadcastable to target"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(shape.iter().product());
        BroadcastPlan::new(shape, &[sa]).for_each_run(|_, offs, st, len| {
            for k in 0..len {
                data.push(src[offs[0] + k * st[0]]);
            }
        });
        Ok(self.push(Op::Broadcast(a), Tensor::from_parts(shape.to_vec(), data)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax(self.value(a))?;
        Ok(self.push(Op::Softmax(a), v))
    }

    /// Log-softmax over the last axis, computed without forming probabilities.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = log_softmax(self.value(a))?;
        Ok(self.push(Op::LogSoftmax(a), v))
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape().to_vec(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, reduce_to(g, self.shape(a)));
                }
                if self.wants(b) {
                    accumulate(grads, b, reduce_to(g, self.shape(b)));
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, reduce_to(g, self.shape(a)));
                }
                if self.wants(b) {
                    accumulate(grads, b, reduce_to(g, self.shape(b)).map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga = self.broadcast_product(g, b, |gv, bv| gv * bv);
                    accumulate(grads, a, reduce_to(&ga, self.shape(a)));
                }
                if self.wants(b) {
                    let gb = self.broadcast_product(g, a, |gv, av| gv * av);
                    accumulate(grads, b, reduce_to(&gb, self.shape(b)));
                }
            }
            &Op::Div(a, b) => {
                if self.wants(a) {
                    let ga = self.broadcast_product(g, b, |gv, bv| gv / bv);
                    accumulate(grads, a, reduce_to(&ga, self.shape(a)));
                }
                if self.wants(b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let q = node.value.data();
                    let gq: Vec<T> = gd.iter().zip(q).map(|(&gv, &qv)| gv * qv).collect();
                    let gq = Tensor::from_parts(g.shape().to_vec(), gq);
                    let gb = self.broadcast_product(&gq, b, |x, bv| -x / bv);
                    accumulate(grads, b, reduce_to(&gb, self.shape(b)));
                }
            }
            &Op::DivScalar(a, d) => {
                let dv = self.value(d).data()[0];
                if self.wants(a) {
                    accumulate(grads, a, g.map(|x| x / dv));
                }
                if self.wants(d) {
                    // d(a/d)/dd = -a/d² summed against the upstream gradient
                    let s: T = gd.iter().zip(node.value.data()).map(|(&gv, &q)| gv * q).sum();
                    let shape = self.shape(d).to_vec();
                    accumulate(grads, d, Tensor::full(shape, -s / dv));
                }
            }
            &Op::Scale(a, f) => {
                if self.wants(a) {
                    accumulate(grads, a, g.map(|x| x * f));
                }
            }
            &Op::Matmul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        (n, 1),
                        vb.data(),
                        (1, n),
                        T::zero(),
                        &mut da,
                        (k, 1),
                    );
                    accumulate(grads, a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        (1, k),
                        gd,
                        (n, 1),
                        T::zero(),
                        &mut db,
                        (n, 1),
                    );
                    accumulate(grads, b, Tensor::from_parts(vec![k, n], db));
                }
            }
            &Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let (gi, gw) = conv::backward(
                    self.value(input),
                    self.value(weight),
                    g,
                    stride,
                    pad,
                    self.wants(input),
                    self.wants(weight),
                );
                if let Some(gi) = gi {
                    accumulate(grads, input, gi);
                }
                if let Some(gw) = gw {
                    accumulate(grads, weight, gw);
                }
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            &Op::Log(a) => {
                let x = self.value(a).data();
                let d = gd.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect();
                accumulate(grads, a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            &Op::Exp(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                accumulate(grads, a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            &Op::Sum(a) => {
                accumulate(grads, a, Tensor::full(self.shape(a).to_vec(), gd[0]));
            }
            &Op::Mean(a) => {
                let n = T::of(self.value(a).len() as f64);
                accumulate(grads, a, Tensor::full(self.shape(a).to_vec(), gd[0] / n));
            }
            &Op::SumLast(a) | &Op::MeanLast(a) => {
                let shape = self.shape(a).to_vec();
                let (rows, n) = last_axis(&shape);
                let div = if matches!(node.op, Op::MeanLast(_)) {
                    T::of(n as f64)
                } else {
                    T::one()
                };
                let mut d = Vec::with_capacity(rows * n);
                for &gv in gd.iter().take(rows) {
                    d.extend(std::iter::repeat_n(gv / div, n));
                }
                accumulate(grads, a, Tensor::from_parts(shape, d));
            }
            Op::MaxLast { src, argmax } => {
                let mut d = Tensor::zeros(self.shape(*src).to_vec());
                for (&pos, &gv) in argmax.iter().zip(gd) {
                    d.data_mut()[pos] += gv;
                }
                accumulate(grads, *src, d);
            }
            &Op::Broadcast(a) => {
                accumulate(grads, a, reduce_to(g, self.shape(a)));
            }
            &Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                accumulate(grads, a, Tensor::from_parts(shape, gd.to_vec()));
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let (rows, n) = last_axis(node.value.shape());
                let mut d = vec![T::zero(); rows * n];
                for r in 0..rows {
                    let s = r * n..(r + 1) * n;
                    let dot: T = gd[s.clone()].iter().zip(&y[s.clone()]).map(|(&a, &b)| a * b).sum();
                    for i in s {
                        d[i] = y[i] * (gd[i] - dot);
                    }
                }
                accumulate(grads, a, Tensor::from_parts(node.value.shape().to_vec(), d));
            }
            &Op::LogSoftmax(a) => {
                let y = node.value.data();
                let (rows, n) = last_axis(node.value.shape());
                let mut d = vec![T::zero(); rows * n];
                for r in 0..rows {
                    let s = r * n..(r + 1) * n;
                    let gsum: T = gd[s.clone()].iter().copied().sum();
                    for i in s {
                        d[i] = gd[i] - y[i].exp() * gsum;
                    }
                }
                accumulate(grads, a, Tensor::from_parts(node.value.shape().to_vec(), d));
            }
        }
    }

    /// `f(g, other)` over the (already broadcast) output shape of `g`.
    fn broadcast_product(&self, g: &Tensor<T>, other: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let so = self.shape(other);
        let vo = self.value(other).data();
        let gd = g.data();
        if so == g.shape() {
            let d = gd.iter().zip(vo).map(|(&a, &b)| f(a, b)).collect();
            return Tensor::from_parts(g.shape().to_vec(), d);
        }
        let mut d = Vec::with_capacity(gd.len());
        BroadcastPlan::new(g.shape(), &[so]).for_each_run(|o, offs, st, len| {
            if st[0] == 0 {
                let y = vo[offs[0]];
                d.extend(gd[o..o + len].iter().map(|&x| f(x, y)));
            } else {
                d.extend(
                    gd[o..o + len]
                        .iter()
                        .zip(&vo[offs[0]..offs[0] + len])
                        .map(|(&x, &y)| f(x, y)),
                );
            }
        });
        Tensor::from_parts(g.shape().to_vec(), d)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` over the axes along which `shape` was broadcast.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = vec![T::zero(); shape.iter().product()];
    let gd = g.data();
    BroadcastPlan::new(g.shape(), &[shape]).for_each_run(|o, offs, st, len| {
        if st[0] == 0 {
            let s: T = gd[o..o + len].iter().copied().sum();
            out[offs[0]] += s;
        } else {
            for k in 0..len {
                out[offs[0] + k * st[0]] += gd[o + k];
            }
        }
    });
    Tensor::from_parts(shape.to_vec(), out)
}

/// Softmax over the last axis with max-subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() == 0 {
        return Err(Error::shape("softmax", &[logits.shape()], "needs a class axis"));
    }
    let (rows, n) = last_axis(logits.shape());
    let d = logits.data();
    let mut out = vec![T::zero(); rows * n];
    for r in 0..rows {
        let row = &d[r * n..(r + 1) * n];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (x - m).exp();
            z += *o;
        }
        for o in &mut out[r * n..(r + 1) * n] {
            *o /= z;
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Log-softmax over the last axis: `x - max - ln Σ exp(x - max)`.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() == 0 {
        return Err(Error::shape("log_softmax", &[logits.shape()], "needs a class axis"));
    }
    let (rows, n) = last_axis(logits.shape());
    let d = logits.data();
    let mut out = vec![T::zero(); rows * n];
    for r in 0..rows {
        let row = &d[r * n..(r + 1) * n];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&x| (x - m).exp()).sum::<T>().ln() + m;
        for (o, &x) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

#[cfg(test)]
mod tests;
