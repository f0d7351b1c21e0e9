//! Minimal reverse-mode differentiation over dense 64-bit tensors.
//!
//! A [`Tape`] records one forward pass. Leaves are either inputs/constants
//! owned by the tape or parameters borrowed from a [`ParameterSet`].
//! [`Tape::backward`] walks the recorded nodes in reverse order once and
//! accumulates parameter gradients into a [`ParamGrads`] store; repeated
//! calls without [`ParamGrads::reset`] accumulate.
//!
//! Tensors are rank 0 (scalar), rank 1 (`[d]`, treated as a `1 x d` row) or
//! rank 2 (`[n, d]`, row-major).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::ShapeMismatch { op: "tensor", detail: format!("rank {} unsupported", shape.len()) });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[[f64; 3]]) -> Self {
        Tensor { shape: vec![rows.len(), 3], data: rows.iter().flatten().copied().collect() }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows when viewed as a matrix.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    fn add_assign(&mut self, other: &[f64]) {
        debug_assert_eq!(self.data.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += *b;
        }
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors with a stable insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value, checking names and shapes match one-to-one.
    pub fn assign(&mut self, other: &ParameterSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::LengthMismatch { left: self.len(), right: other.len() });
        }
        for i in 0..self.len() {
            if self.names[i] != other.names[i] || self.values[i].shape != other.values[i].shape {
                return Err(Error::ShapeMismatch {
                    op: "assign",
                    detail: format!(
                        "`{}` {:?} vs `{}` {:?}",
                        self.names[i], self.values[i].shape, other.names[i], other.values[i].shape
                    ),
                });
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

/// Gradient store parallel to a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        ParamGrads { grads: params.values.iter().map(|v| Some(Tensor::zeros(&v.shape))).collect() }
    }

    /// A store with no gradients at all; stepping with it is an error.
    pub fn empty(params: &ParameterSet) -> Self {
        ParamGrads { grads: vec![None; params.len()] }
    }

    pub fn reset(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(t) => t.add_assign(&g.data),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    AddRowBroadcast { x: Var, v: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    MaxPoolPoints { x: Var, argmax: Vec<usize> },
    Concat(Var, Var),
    Softmax(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    Cosine(Var, Var),
    RowCosine(Var, Var),
    Chamfer { a: Var, b: Var, nn_ab: Vec<usize>, nn_ba: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct Tape<'p> {
    params: Option<&'p ParameterSet>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// `out[n x b] += x[n x a] * w[a x b]`. Row results do not depend on other
/// rows, so permuting input rows permutes outputs bitwise.
fn matmul_acc(x: &[f64], w: &[f64], out: &mut [f64], n: usize, a: usize, b: usize) {
    for i in 0..n {
        let xr = &x[i * a..(i + 1) * a];
        let or = &mut out[i * b..(i + 1) * b];
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * b..(k + 1) * b];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = m[i * cols + j];
        }
    }
    t
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { params: None, nodes: Vec::new() }
    }

    pub fn with_params(params: &'p ParameterSet) -> Self {
        Tape { params: Some(params), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("parameter node without parameter set").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    /// Scalar value of a rank-0 (or single element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf owned by the tape.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf referring to a parameter of the borrowed set (no copy).
    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "tape has no parameter set");
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// `x W + b` applied rowwise; a rank-1 `x` yields a rank-1 result.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.rank() != 2 || xt.cols() != wt.rows() {
            return Err(mismatch("linear", format!("x {:?} times w {:?}", xt.shape, wt.shape)));
        }
        let (n, a, bcols) = (xt.rows(), xt.cols(), wt.cols());
        let mut out = vec![0.0; n * bcols];
        if let Some(bv) = b {
            let bt = self.value(bv);
            if bt.len() != bcols {
                return Err(mismatch("linear", format!("bias {:?} for {} outputs", bt.shape, bcols)));
            }
            for row in out.chunks_mut(bcols) {
                row.copy_from_slice(&bt.data);
            }
        }
        matmul_acc(&xt.data, &wt.data, &mut out, n, a, bcols);
        let shape = if xt.rank() == 2 { vec![n, bcols] } else { vec![bcols] };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|bv| self.rg(bv));
        self.push(Tensor { shape, data: out }, Op::Linear { x, w, b }, rg)
    }

    /// Adds the vector `v` to every row of `x`.
    pub fn add_row_broadcast(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xt, vt) = (self.value(x), self.value(v));
        if vt.len() != xt.cols() {
            return Err(mismatch("add_row_broadcast", format!("{:?} + {:?}", xt.shape, vt.shape)));
        }
        let mut out = xt.clone();
        for row in out.data.chunks_mut(vt.len()) {
            for (o, &a) in row.iter_mut().zip(&vt.data) {
                *o += a;
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out, Op::AddRowBroadcast { x, v }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape != bt.shape {
            return Err(mismatch(op, format!("{:?} vs {:?}", at.shape, bt.shape)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (at, bt) = (self.value(a), self.value(b));
        Tensor { shape: at.shape.clone(), data: at.data.iter().zip(&bt.data).map(|(x, y)| f(*x, *y)).collect() }
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xt = self.value(x);
        Tensor { shape: xt.shape.clone(), data: xt.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.map(x, |v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.map(x, |v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Columnwise maximum over the rows (points) of `x`; ties resolve to the
    /// lowest row index.
    pub fn max_pool_points(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 2 || xt.rows() == 0 {
            return Err(mismatch("max_pool_points", format!("needs a nonempty matrix, got {:?}", xt.shape)));
        }
        let (n, d) = (xt.rows(), xt.cols());
        let mut out = xt.data[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..n {
            let row = &xt.data[i * d..(i + 1) * d];
            for j in 0..d {
                if row[j] > out[j] {
                    out[j] = row[j];
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::MaxPoolPoints { x, argmax }, rg)
    }

    /// Concatenation along the last axis (rank-1 vectors, or matrices with
    /// equal row counts).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != bt.rank() || at.rank() == 0 || at.rows() != bt.rows() {
            return Err(mismatch("concat", format!("{:?} with {:?}", at.shape, bt.shape)));
        }
        let (n, p, q) = (at.rows(), at.cols(), bt.cols());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(at.row(i));
            data.extend_from_slice(bt.row(i));
        }
        let shape = if at.rank() == 2 { vec![n, p + q] } else { vec![p + q] };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }, Op::Concat(a, b), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 1 {
            return Err(mismatch("softmax", format!("needs a vector, got {:?}", xt.shape)));
        }
        let m = xt.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut data: Vec<f64> = xt.data.iter().map(|v| libm::exp(v - m)).collect();
        let z: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= z);
        let rg = self.rg(x);
        self.push(Tensor::vector(data), Op::Softmax(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, libm::log);
        let rg = self.rg(x);
        self.push(out, Op::Log(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let s = xt.data.iter().sum::<f64>() / xt.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let s = linalg::sqrt(self.value(x).data.iter().map(|v| v * v).sum());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::L2Norm(x), rg)
    }

    /// Cosine similarity of two same-shape tensors viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let na = linalg::sqrt(at.data.iter().map(|v| v * v).sum());
        let nb = linalg::sqrt(bt.data.iter().map(|v| v * v).sum());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroVector("cosine"));
        }
        let d: f64 = at.data.iter().zip(&bt.data).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(d / (na * nb)), Op::Cosine(a, b), rg)
    }

    /// Rowwise cosine similarity of two `n x d` matrices, giving `[n]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let (n, d) = (at.rows(), at.cols());
        let mut out = vec![0.0; n];
        for i in 0..n {
            let (ar, br) = (&at.data[i * d..(i + 1) * d], &bt.data[i * d..(i + 1) * d]);
            let na = linalg::sqrt(ar.iter().map(|v| v * v).sum());
            let nb = linalg::sqrt(br.iter().map(|v| v * v).sum());
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroVector("row_cosine"));
            }
            out[i] = ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::vector(out), Op::RowCosine(a, b), rg)
    }

    /// Symmetric Chamfer distance between two `n x 3` point matrices with
    /// plain Euclidean norms; gradients flow through the nearest pairs.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.cols() != 3 || bt.cols() != 3 || at.rows() == 0 || bt.rows() == 0 {
            return Err(mismatch("chamfer", format!("{:?} vs {:?}", at.shape, bt.shape)));
        }
        let pa = as_points(at);
        let pb = as_points(bt);
        let (dab, nn_ab) = cloud::directed_nearest(&pa, &pb);
        let (dba, nn_ba) = cloud::directed_nearest(&pb, &pa);
        let v = dab.iter().sum::<f64>() / pa.len() as f64 + dba.iter().sum::<f64>() / pb.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::Chamfer { a, b, nn_ab, nn_ba }, rg)
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `param_grads`; the returned [`Gradients`] hold every node's gradient.
    pub fn backward(&self, loss: Var, param_grads: &mut ParamGrads) -> Result<Gradients> {
        let len = self.value(loss).len();
        if len != 1 {
            return Err(Error::NonScalarLoss { len });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let lt = self.value(loss);
        grads[loss.0] = Some(Tensor { shape: lt.shape.clone(), data: vec![1.0] });

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads, param_grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>], pg: &mut ParamGrads) {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        let send = |grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&data),
                slot @ None => {
                    let shape = self.value(v).shape.clone();
                    *slot = Some(Tensor { shape, data });
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => pg.accumulate(*id, g),
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, a, bc) = (xt.rows(), xt.cols(), wt.cols());
                if self.rg(*x) {
                    let wt_t = transpose(&wt.data, a, bc);
                    let mut dx = vec![0.0; n * a];
                    matmul_acc(&g.data, &wt_t, &mut dx, n, bc, a);
                    send(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; a * bc];
                    for i in 0..n {
                        let gr = &g.data[i * bc..(i + 1) * bc];
                        for k in 0..a {
                            let xv = xt.data[i * a + k];
                            if xv == 0.0 {
                                continue;
                            }
                            for (d, &gv) in dw[k * bc..(k + 1) * bc].iter_mut().zip(gr) {
                                *d += xv * gv;
                            }
                        }
                    }
                    send(grads, *w, dw);
                }
                if let Some(bv) = b {
                    if self.rg(*bv) {
                        send(grads, *bv, column_sums(&g.data, n, bc));
                    }
                }
            }
            Op::AddRowBroadcast { x, v } => {
                send(grads, *x, g.data.clone());
                let xt = self.value(*x);
                send(grads, *v, column_sums(&g.data, xt.rows(), xt.cols()));
            }
            Op::Add(a, b) => {
                send(grads, *a, g.data.clone());
                send(grads, *b, g.data.clone());
            }
            Op::Sub(a, b) => {
                send(grads, *a, g.data.clone());
                send(grads, *b, g.data.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                send(grads, *a, g.data.iter().zip(&bt.data).map(|(gv, y)| gv * y).collect());
                send(grads, *b, g.data.iter().zip(&at.data).map(|(gv, x)| gv * x).collect());
            }
            Op::Scale(x, c) => send(grads, *x, g.data.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => send(grads, *x, g.data.clone()),
            Op::Relu(x) => {
                send(grads, *x, g.data.iter().zip(&out.data).map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 }).collect())
            }
            Op::MaxPoolPoints { x, argmax } => {
                let xt = self.value(*x);
                let d = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                for (j, &i) in argmax.iter().enumerate() {
                    dx[i * d + j] = g.data[j];
                }
                send(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let n = out.rows();
                let mut da = Vec::with_capacity(n * p);
                let mut db = Vec::with_capacity(n * q);
                for i in 0..n {
                    let r = &g.data[i * (p + q)..(i + 1) * (p + q)];
                    da.extend_from_slice(&r[..p]);
                    db.extend_from_slice(&r[p..]);
                }
                send(grads, *a, da);
                send(grads, *b, db);
            }
            Op::Softmax(x) => {
                let s = &out.data;
                let dot: f64 = g.data.iter().zip(s).map(|(gv, sv)| gv * sv).sum();
                send(grads, *x, s.iter().zip(&g.data).map(|(sv, gv)| sv * (gv - dot)).collect());
            }
            Op::Log(x) => {
                let xt = self.value(*x);
                send(grads, *x, g.data.iter().zip(&xt.data).map(|(gv, v)| gv / v).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                send(grads, *x, vec![g.data[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(grads, *x, vec![g.data[0] / n as f64; n]);
            }
            Op::L2Norm(x) => {
                let xt = self.value(*x);
                let nrm = out.data[0];
                let s = if nrm > 0.0 { g.data[0] / nrm } else { 0.0 };
                send(grads, *x, xt.data.iter().map(|v| v * s).collect());
            }
            Op::Cosine(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (da, db) = cosine_grads(&at.data, &bt.data, out.data[0], g.data[0]);
                send(grads, *a, da);
                send(grads, *b, db);
            }
            Op::RowCosine(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (n, d) = (at.rows(), at.cols());
                let mut da = Vec::with_capacity(n * d);
                let mut db = Vec::with_capacity(n * d);
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    let (ga, gb) = cosine_grads(&at.data[r.clone()], &bt.data[r], out.data[i], g.data[i]);
                    da.extend(ga);
                    db.extend(gb);
                }
                send(grads, *a, da);
                send(grads, *b, db);
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (pa, pb) = (as_points(at), as_points(bt));
                let mut da = vec![0.0; at.len()];
                let mut db = vec![0.0; bt.len()];
                let sa = g.data[0] / pa.len() as f64;
                for (i, &j) in nn_ab.iter().enumerate() {
                    let diff = linalg::sub(pa[i], pb[j]);
                    let dn = linalg::norm(diff);
                    if dn > 0.0 {
                        for k in 0..3 {
                            da[3 * i + k] += sa * diff[k] / dn;
                            db[3 * j + k] -= sa * diff[k] / dn;
                        }
                    }
                }
                let sb = g.data[0] / pb.len() as f64;
                for (j, &i) in nn_ba.iter().enumerate() {
                    let diff = linalg::sub(pb[j], pa[i]);
                    let dn = linalg::norm(diff);
                    if dn > 0.0 {
                        for k in 0..3 {
                            db[3 * j + k] += sb * diff[k] / dn;
                            da[3 * i + k] -= sb * diff[k] / dn;
                        }
                    }
                }
                send(grads, *a, da);
                send(grads, *b, db);
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::Linear { .. } => "linear",
        Op::AddRowBroadcast { .. } => "add_row_broadcast",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(_) => "relu",
        Op::MaxPoolPoints { .. } => "max_pool_points",
        Op::Concat(..) => "concat",
        Op::Softmax(_) => "softmax",
        Op::Log(_) => "log",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::L2Norm(_) => "l2_norm",
        Op::Cosine(..) => "cosine",
        Op::RowCosine(..) => "row_cosine",
        Op::Chamfer { .. } => "chamfer",
    }
}

fn column_sums(g: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; d];
    for i in 0..n {
        for (acc, v) in s.iter_mut().zip(&g[i * d..(i + 1) * d]) {
            *acc += *v;
        }
    }
    s
}

fn cosine_grads(a: &[f64], b: &[f64], c: f64, g: f64) -> (Vec<f64>, Vec<f64>) {
    let na = linalg::sqrt(a.iter().map(|v| v * v).sum());
    let nb = linalg::sqrt(b.iter().map(|v| v * v).sum());
    let inv = 1.0 / (na * nb);
    let da = a.iter().zip(b).map(|(x, y)| g * (y * inv - c * x / (na * na))).collect();
    let db = a.iter().zip(b).map(|(x, y)| g * (x * inv - c * y / (nb * nb))).collect();
    (da, db)
}

fn as_points(t: &Tensor) -> Vec<[f64; 3]> {
    t.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Per-node gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        AdamState {
            step: 0,
            m: params.values.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            v: params.values.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut ParameterSet, grads: &ParamGrads, cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    if grads.grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::LengthMismatch { left: params.len(), right: grads.grads.len() });
    }
    for (i, g) in grads.grads.iter().enumerate() {
        match g {
            Some(g) if g.shape == params.values[i].shape => {}
            _ => return Err(Error::MissingGrad(params.names[i].clone())),
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t);
    for (i, g) in grads.grads.iter().enumerate() {
        let g = g.as_ref().expect("checked above");
        let p = &mut params.values[i].data;
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for k in 0..p.len() {
            let gk = g.data[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= cfg.lr * mh / (linalg::sqrt(vh) + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hand_arithmetic() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = t.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let b = t.constant(Tensor::vector(vec![3.0]));
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y).data(), &[6.0]);
        let bad = t.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        assert!(matches!(t.linear(x, bad, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![0.3, -2.0, 5.0]));
        let s = t.sum(x).unwrap();
        let mut pg = ParamGrads::empty(&ParameterSet::new());
        let g = t.backward(s, &mut pg).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s, &mut ParamGrads::empty(&ParameterSet::new())).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
        assert!(matches!(
            t.backward(x, &mut ParamGrads::empty(&ParameterSet::new())),
            Err(Error::NonScalarLoss { len: 2 })
        ));
    }

    #[test]
    fn softmax_and_pool_basics() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = t.softmax(x).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        let row = t.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        let p = t.max_pool_points(row).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn max_pool_gradient_is_one_hot() {
        let mut t = Tape::new();
        let x = t.input(Tensor::matrix(3, 2, vec![1.0, 5.0, 4.0, 5.0, 2.0, 0.0]).unwrap());
        let p = t.max_pool_points(x).unwrap();
        let w = t.constant(Tensor::vector(vec![2.0, 3.0]));
        let m = t.mul(p, w).unwrap();
        let s = t.sum(m).unwrap();
        let g = t.backward(s, &mut ParamGrads::empty(&ParameterSet::new())).unwrap();
        // column 1 ties between rows 0 and 1: the lower row receives the gradient
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 3.0, 2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_rejects_zero() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert_eq!(t.cosine(a, b), Err(Error::ZeroVector("cosine")));
    }

    #[test]
    fn nan_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(t.log(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParameterSet::new();
        let id = ps.add("p", Tensor::scalar(0.5)).unwrap();
        let mut grads = ParamGrads::zeros_like(&ps);
        let mut state = AdamState::new(&ps);
        let cfg = AdamConfig::default();
        adam_step(&mut ps, &grads, &cfg, &mut state).unwrap();
        assert_eq!(ps.get(id).data(), &[0.5]);

        let mut ps2 = ParameterSet::new();
        ps2.add("p", Tensor::scalar(0.5)).unwrap();
        let mut state2 = AdamState::new(&ps2);
        grads.grads[0] = Some(Tensor::scalar(1.0));
        adam_step(&mut ps2, &grads, &cfg, &mut state2).unwrap();
        let moved = 0.5 - ps2.get(id).data()[0];
        assert!((moved - 1e-3).abs() < 1e-9);

        let empty = ParamGrads::empty(&ps2);
        assert!(matches!(adam_step(&mut ps2, &empty, &cfg, &mut state2), Err(Error::MissingGrad(_))));
    }
}
