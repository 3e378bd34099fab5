//! Tape-style reverse-mode differentiation over [`DenseArray`] values.
//!
//! A [`Graph`] records every op eagerly, in execution order. Backward replays
//! the tape in reverse and accumulates adjoints. Nodes built only from
//! constants are marked as not requiring gradients and are skipped.

use super::{kernels, DenseArray};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    RowSoftmax(Var),
    RowL2Normalize(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Scale(Var, f64),
    Conv2d(Var, Var, Var),
    MaxPool2d(Var, Vec<usize>),
    Reshape(Var),
    ConcatRows(Vec<Var>),
}

struct Node {
    value: DenseArray,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Adjoints(Vec<Option<DenseArray>>);

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseArray> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

fn bcast_kind(op: &'static str, a: &DenseArray, b: &DenseArray) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Full);
    }
    if b.is_scalar() {
        return Ok(Bcast::Scalar);
    }
    if let ([_, c], [1, c2]) = (a.shape(), b.shape()) {
        if c == c2 {
            return Ok(Bcast::Row);
        }
    }
    Err(Error::shape(op, a.shape(), b.shape()))
}

fn bcast_get(b: &[f64], kind: Bcast, i: usize, cols: usize) -> f64 {
    match kind {
        Bcast::Full => b[i],
        Bcast::Row => b[i % cols],
        Bcast::Scalar => b[0],
    }
}

/// Reduces a full-shape adjoint back to the broadcast operand's shape.
fn bcast_reduce(g: Vec<f64>, kind: Bcast, shape: &[usize], cols: usize) -> DenseArray {
    match kind {
        Bcast::Full => DenseArray::from_parts(shape.to_vec(), g),
        Bcast::Row => {
            let mut out = vec![0.0; cols];
            for row in g.chunks(cols) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            DenseArray::from_parts(shape.to_vec(), out)
        }
        Bcast::Scalar => DenseArray::from_parts(shape.to_vec(), vec![g.iter().sum()]),
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

    fn push(&mut self, op_name: &'static str, value: DenseArray, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        // Put the broadcast operand second.
        let (a, b) = if self.value(a).len() < self.value(b).len() { (b, a) } else { (a, b) };
        let (av, bv) = (self.value(a), self.value(b));
        let kind = bcast_kind(name, av, bv)?;
        let cols = *av.shape().last().unwrap();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bcast_get(bv.data(), kind, i, cols);
                if mul { x * y } else { x + y }
            })
            .collect();
        let out = DenseArray::from_parts(av.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        let op = if mul { Op::Mul(a, b, kind) } else { Op::Add(a, b, kind) };
        self.push(name, out, op, ng)
    }

    /// Elementwise sum; the smaller operand may be a `[1,n]` row or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, false)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("multiply", a, b, true)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(name, out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |v| v * s, Op::Scale(a, s))
    }

    /// `sigmoid(x) = (tanh(x/2) + 1) / 2`, composed from primitives.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let half = self.scale(a, 0.5)?;
        let t = self.tanh(half)?;
        let one = self.constant(DenseArray::scalar(1.0));
        let shifted = self.add(t, one)?;
        self.scale(shifted, 0.5)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let out = kernels::row_softmax(self.value(a))?;
        let ng = self.needs(a);
        self.push("row_softmax", out, Op::RowSoftmax(a), ng)
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let out = kernels::l2_normalize_rows(self.value(a), eps)?;
        let norms = kernels::row_norms(self.value(a))?;
        let ng = self.needs(a);
        self.push("l2_normalize_rows", out, Op::RowL2Normalize(a, norms), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push("sum", DenseArray::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(a);
        self.push("mean", DenseArray::scalar(s), Op::Mean(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.needs(a);
        self.push("transpose", out, Op::Transpose(a), ng)
    }

    /// Same-padded stride-1 convolution with bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), self.value(b))?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("conv2d", out, Op::Conv2d(x, w, b), ng)
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let (out, arg) = kernels::max_pool2d(self.value(x), size)?;
        let ng = self.needs(x);
        self.push("max_pool2d", out, Op::MaxPool2d(x, arg), ng)
    }

    /// Structural: same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        self.push("reshape", out, Op::Reshape(a), ng)
    }

    /// Structural: vertical stack of 2-D arrays with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&DenseArray> = parts.iter().map(|&p| self.value(p)).collect();
        let out = DenseArray::concat_rows(&vals)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// `x·W + b` with `b` a `[1,n]` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Mean over rows of `−log Σ_j softmax(logits)_ij · target_ij`.
    ///
    /// `target` is a constant row-stochastic selection (usually one-hot).
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &DenseArray) -> Result<Var> {
        let (_, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if self.shape(logits) != target.shape() {
            return Err(Error::shape("softmax_cross_entropy", self.shape(logits), target.shape()));
        }
        let p = self.row_softmax(logits)?;
        let t = self.constant(target.clone());
        let picked = self.mul(p, t)?;
        let ones = self.constant(DenseArray::full(&[c, 1], 1.0));
        let per_row = self.matmul(picked, ones)?;
        let logp = self.log(per_row)?;
        let m = self.mean(logp)?;
        self.scale(m, -1.0)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Adjoints> {
        if !self.value(out).is_scalar() {
            return Err(Error::shape("backward", self.shape(out), &[1]));
        }
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(DenseArray::full(self.shape(out), 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_grads(node, &g)?;
            for (v, dg) in contributions {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(dg.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Adjoints(grads))
    }

    fn local_grads(&self, node: &Node, g: &DenseArray) -> Result<Vec<(Var, DenseArray)>> {
        let val = |v: Var| self.value(v);
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            // f(input, output, upstream)
            let x = val(a).data();
            let data = x
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            DenseArray::from_parts(val(a).shape().to_vec(), data)
        };
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.needs(*a) {
                    v.push((*a, kernels::matmul_nt(g, val(*b))?));
                }
                if self.needs(*b) {
                    v.push((*b, kernels::matmul_tn(val(*a), g)?));
                }
                v
            }
            Op::Add(a, b, kind) => {
                let cols = *g.shape().last().unwrap();
                vec![
                    (*a, g.clone()),
                    (*b, bcast_reduce(g.data().to_vec(), *kind, val(*b).shape(), cols)),
                ]
            }
            Op::Mul(a, b, kind) => {
                let cols = *g.shape().last().unwrap();
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bcast_get(bd, *kind, i, cols))
                    .collect();
                let gb: Vec<f64> = g.data().iter().zip(ad).map(|(gi, ai)| gi * ai).collect();
                vec![
                    (*a, DenseArray::from_parts(val(*a).shape().to_vec(), ga)),
                    (*b, bcast_reduce(gb, *kind, val(*b).shape(), cols)),
                ]
            }
            Op::Tanh(a) => vec![(*a, elementwise(*a, &|_, y, g| g * (1.0 - y * y)))],
            Op::Relu(a) => vec![(*a, elementwise(*a, &|x, _, g| if x > 0.0 { g } else { 0.0 }))],
            Op::Exp(a) => vec![(*a, elementwise(*a, &|_, y, g| g * y))],
            Op::Log(a) => vec![(*a, elementwise(*a, &|x, _, g| g / x))],
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::RowSoftmax(a) => {
                let c = *g.shape().last().unwrap();
                let mut data = Vec::with_capacity(g.len());
                for (y, gy) in node.value.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    data.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                }
                vec![(*a, DenseArray::from_parts(g.shape().to_vec(), data))]
            }
            Op::RowL2Normalize(a, norms) => {
                let c = *g.shape().last().unwrap();
                let mut data = Vec::with_capacity(g.len());
                for ((y, gy), n) in node.value.data().chunks(c).zip(g.data().chunks(c)).zip(norms) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    data.extend(y.iter().zip(gy).map(|(yi, gi)| (gi - yi * dot) / n));
                }
                vec![(*a, DenseArray::from_parts(g.shape().to_vec(), data))]
            }
            Op::Sum(a) => vec![(*a, DenseArray::full(val(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, DenseArray::full(val(*a).shape(), g.data()[0] / n))]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Conv2d(x, w, b) => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x), val(*w), val(*b), g, self.needs(*x))?;
                let mut v = vec![(*w, dw), (*b, db)];
                if let Some(dx) = dx {
                    v.push((*x, dx));
                }
                v
            }
            Op::MaxPool2d(x, arg) => {
                let mut dx = vec![0.0; val(*x).len()];
                for (&i, &gi) in arg.iter().zip(g.data()) {
                    dx[i] += gi;
                }
                vec![(*x, DenseArray::from_parts(val(*x).shape().to_vec(), dx))]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).len();
                    v.push((p, DenseArray::from_parts(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())));
                    offset += n;
                }
                v
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(DenseArray::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let f = g.sum(sq).unwrap();
        assert_eq!(g.value(f).data(), &[14.0]);
        let adj = g.backward(f).unwrap();
        assert_eq!(adj.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn linear_map_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(DenseArray::zeros(&[2, 2]));
        let v = g.constant(DenseArray::full(&[2, 1], 1.0));
        let wv = g.matmul(w, v).unwrap();
        let f = g.sum(wv).unwrap();
        assert_eq!(g.value(f).data(), &[0.0]);
        let adj = g.backward(f).unwrap();
        assert_eq!(adj.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::zeros(&[2, 3]));
        let b = g.constant(DenseArray::zeros(&[2, 3]));
        match g.matmul(a, b).unwrap_err() {
            Error::Shape { op, left, right } => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(DenseArray::zeros(&[1, 2]));
        match g.log(a).unwrap_err() {
            Error::NonFinite { op } => assert_eq!(op, "log"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(DenseArray::full(&[2, 2], 3.0));
        let x = g.leaf(DenseArray::full(&[2, 2], 1.0));
        let y = g.mul(c, x).unwrap();
        let f = g.sum(y).unwrap();
        let adj = g.backward(f).unwrap();
        assert!(adj.get(c).is_none());
        assert_eq!(adj.get(x).unwrap().data(), &[3.0; 4]);
    }
}
