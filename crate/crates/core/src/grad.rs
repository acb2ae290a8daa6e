//! Dense 64-bit tensors with tape-based reverse-mode differentiation.
//!
//! Every primitive checks shapes explicitly (there is no broadcasting) and
//! rejects non-finite outputs. Nodes are appended to a [`Tape`] in evaluation
//! order; [`Tape::backward`] walks them in exact reverse order.
//!
//! Trainable weights live in a [`ParamStore`]. A forward pass copies them onto
//! a tape with [`Tape::param`], and [`Tape::backward_into`] accumulates the
//! resulting gradients into a [`GradBuffer`] that the caller zeroes.

use crate::error::{Error, Result};

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stable identifier of a [`Parameter`] inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * buffer` to the stored gradients.
    pub fn accumulate(&mut self, buffer: &GradBuffer, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&buffer.grads) {
            for (dst, src) in p.grad.data.iter_mut().zip(g) {
                *dst += scale * src;
            }
        }
    }

    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer {
            grads: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }
}

/// Per-parameter gradient accumulator, shaped like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(Vec::as_slice)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    LogSigmoid(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Slice(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    IndexSelect(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Gradients of every tape node with respect to one scalar.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Records primitive operations for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        debug_assert_eq!(node.value.len(), 1);
        node.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor { shape: node.shape.clone(), data: node.value.clone() }
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant (or differentiable input) that is not a parameter.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t.shape, t.data, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.push("param", p.value.shape.clone(), p.value.data.clone(), Op::Param(id))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        self.push(name, self.shape(a).to_vec(), value, op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(name, self.shape(a).to_vec(), value, op)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.map("neg", a, |x| -x, Op::Neg(a))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| c * x, Op::Scale(a, c))
    }

    /// Absolute value; the subgradient at exactly zero is zero.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.map("softplus", a, stable_softplus, Op::Softplus(a))
    }

    /// `ln(sigmoid(x))`, finite for every finite input.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("log_sigmoid", a, |x| -stable_softplus(-x), Op::LogSigmoid(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or(Error::Shape { op: "log_softmax", lhs: vec![], rhs: vec![] })?;
        if width == 0 {
            return Err(Error::Shape { op: "log_softmax", lhs: shape, rhs: vec![] });
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push("log_softmax", shape, out, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Shape { op: "mean", lhs: self.shape(a).to_vec(), rhs: vec![] });
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![], vec![m], Op::Mean(a))
    }

    /// Contiguous run of the flattened values starting at `start`, viewed with `shape`.
    pub fn slice(&mut self, a: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src = self.value(a);
        if start + len > src.len() {
            return Err(Error::Shape { op: "slice", lhs: self.shape(a).to_vec(), rhs: vec![start, len] });
        }
        let value = src[start..start + len].to_vec();
        self.push("slice", shape.to_vec(), value, Op::Slice(a, start))
    }

    /// Row `i` of a 2-D tensor as a `[1, cols]` tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 || i >= shape[0] {
            return Err(Error::Shape { op: "row", lhs: shape.to_vec(), rhs: vec![i] });
        }
        let cols = shape[1];
        self.slice(a, i * cols, &[1, cols])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let value = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a))
    }

    /// Concatenates 1-D tensors, or 2-D tensors along `axis` 0 or 1.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|v| self.shape(*v).to_vec())
            .ok_or(Error::Shape { op: "concat", lhs: vec![], rhs: vec![] })?;
        let rank = first.len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(Error::Shape { op: "concat", lhs: first, rhs: vec![axis] });
        }
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == first[d]);
            if !ok {
                return Err(Error::Shape { op: "concat", lhs: first, rhs: s.to_vec() });
            }
        }
        let total: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut value = Vec::with_capacity(shape.iter().product());
        if axis == 0 {
            for p in parts {
                value.extend_from_slice(self.value(*p));
            }
        } else {
            for r in 0..first[0] {
                for p in parts {
                    let w = self.shape(*p)[1];
                    value.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
                }
            }
        }
        self.push("concat", shape, value, Op::Concat(parts.to_vec(), axis))
    }

    /// Gathers flattened elements `indices` into a tensor of `shape`.
    /// Indices may repeat, which makes this the explicit repeat primitive.
    pub fn index_select(&mut self, a: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != indices.len() || indices.iter().any(|&i| i >= src.len()) {
            return Err(Error::Shape { op: "index_select", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let value = indices.iter().map(|&i| src[i]).collect();
        self.push("index_select", shape.to_vec(), value, Op::IndexSelect(a, indices.to_vec()))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that adds parameter gradients into `buffer`.
    pub fn backward_into(&self, loss: Var, buffer: &mut GradBuffer) -> Result<()> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                for (dst, src) in buffer.grads[id.0].iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[id];
        let out = &node.value;
        macro_rules! unary {
            ($a:expr, |$i:ident, $x:ident| $d:expr) => {{
                let a = $a;
                let xs = &self.nodes[a.0].value;
                let dst = acc(grads, a, xs.len());
                for ($i, (d, $x)) in dst.iter_mut().zip(xs).enumerate() {
                    *d += g[$i] * $d;
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                {
                    let da = acc(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                let db = acc(grads, *b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += x * gv;
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                acc(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(grads, *a, g.len()).iter_mut().enumerate().for_each(|(i, d)| *d += g[i] * bv[i]);
                acc(grads, *b, g.len()).iter_mut().enumerate().for_each(|(i, d)| *d += g[i] * av[i]);
            }
            Op::Neg(a) => unary!(*a, |i, _x| -1.0),
            Op::Scale(a, c) => unary!(*a, |i, _x| *c),
            Op::Abs(a) => unary!(*a, |i, x| sign_or_zero(*x)),
            Op::Exp(a) => unary!(*a, |i, _x| out[i]),
            Op::Log(a) => unary!(*a, |i, x| 1.0 / x),
            Op::Sigmoid(a) => unary!(*a, |i, _x| out[i] * (1.0 - out[i])),
            Op::Tanh(a) => unary!(*a, |i, _x| 1.0 - out[i] * out[i]),
            Op::Softplus(a) => unary!(*a, |i, x| stable_sigmoid(*x)),
            Op::LogSigmoid(a) => unary!(*a, |i, x| stable_sigmoid(-*x)),
            Op::LogSoftmax(a) => {
                let width = *node.shape.last().expect("rank >= 1");
                let dst = acc(grads, *a, out.len());
                for (r, (orow, grow)) in out.chunks(width).zip(g.chunks(width)).enumerate() {
                    let gsum: f64 = grow.iter().sum();
                    for c in 0..width {
                        dst[r * width + c] += grow[c] - orow[c].exp() * gsum;
                    }
                }
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                acc(grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                let s = g[0] / len as f64;
                acc(grads, *a, len).iter_mut().for_each(|d| *d += s);
            }
            Op::Slice(a, start) => {
                let len = self.nodes[a.0].value.len();
                let dst = acc(grads, *a, len);
                dst[*start..*start + g.len()].iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Reshape(a) => {
                acc(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        acc(grads, *p, len).iter_mut().zip(&g[offset..offset + len]).for_each(|(d, x)| *d += x);
                        offset += len;
                    }
                } else {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut col = 0;
                    for p in parts {
                        let w = self.nodes[p.0].shape[1];
                        let dst = acc(grads, *p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                dst[r * w + c] += g[r * total + col + c];
                            }
                        }
                        col += w;
                    }
                }
            }
            Op::IndexSelect(a, indices) => {
                let len = self.nodes[a.0].value.len();
                let dst = acc(grads, *a, len);
                for (gv, &i) in g.iter().zip(indices) {
                    dst[i] += gv;
                }
            }
        }
    }
}
