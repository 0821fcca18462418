//! Dense fp64 tensors and a reverse-mode tape.
//!
//! The tape is an arena of nodes appended in execution order. Parameters are
//! registered as borrowed leaves, so building a per-sample graph never copies
//! the embedding table. `Tape::backward` consumes the tape and walks the arena
//! in reverse, returning one gradient buffer per parameter key. Gradients that
//! reach a parameter only through `gather` stay sparse (touched rows only).

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Norm below which `l2_normalize` refuses its input.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
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

    /// Rows of a 2-D tensor; 1-D tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => self.data.len(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Some((*m, *n)),
            _ => None,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Value-level L2 normalization with the same degenerate-input contract as
/// the tape op.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if !n.is_finite() {
        return Err(Error::NonFinite("l2_normalize input"));
    }
    if n < MIN_NORM {
        return Err(Error::Degenerate { norm: n });
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Plain row-major matrix product, no tape.
pub fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_values(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Softmax of a 2-D tensor along `axis` (0 = down columns, 1 = across rows).
/// 1-D tensors are treated as a single row.
fn softmax_values(x: &[f64], rows: usize, cols: usize, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let (outer, inner, stride_outer, stride_inner) = if axis == 1 {
        (rows, cols, cols, 1)
    } else {
        (cols, rows, 1, cols)
    };
    for o in 0..outer {
        let base = o * stride_outer;
        let max = (0..inner)
            .map(|i| x[base + i * stride_inner])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..inner {
            let e = (x[base + i * stride_inner] - max).exp();
            out[base + i * stride_inner] = e;
            sum += e;
        }
        for i in 0..inner {
            out[base + i * stride_inner] /= sum;
        }
    }
    out
}

/// Softmax outside the tape.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    let (rows, cols) = (x.rows(), x.cols());
    if axis > 1 || (x.shape.len() == 1 && axis != 0) {
        return Err(Error::Contract(format!(
            "softmax axis {axis} invalid for shape {:?}",
            x.shape
        )));
    }
    let axis = if x.shape.len() == 1 { 1 } else { axis };
    Ok(Tensor {
        shape: x.shape.clone(),
        data: softmax_values(&x.data, rows, cols, axis),
    })
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { key: Option<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    L2Normalize { x: Var, norm: f64 },
    Concat(Vec<Var>),
    Reshape(Var),
    Gather { table: Var, rows: Vec<usize> },
    Dot(Var, Var),
    SumSquares(Var),
    Sum(Var),
    SampledSoftmax { logits: Var, probs: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Record of executed differentiable operations.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradient for one parameter: dense, or a set of touched rows.
#[derive(Clone, Debug)]
pub enum Grad {
    Dense(Vec<f64>),
    Rows { cols: usize, rows: BTreeMap<usize, Vec<f64>> },
}

impl Grad {
    fn add_dense(&mut self, g: &[f64]) {
        match self {
            Grad::Dense(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            Grad::Rows { cols, rows } => {
                let mut dense = g.to_vec();
                for (&r, vals) in rows.iter() {
                    for (j, v) in vals.iter().enumerate() {
                        dense[r * *cols + j] += v;
                    }
                }
                *self = Grad::Dense(dense);
            }
        }
    }

    fn add_row(&mut self, row: usize, cols: usize, g: &[f64]) {
        match self {
            Grad::Dense(acc) => acc[row * cols..(row + 1) * cols]
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b),
            Grad::Rows { rows, .. } => {
                let entry = rows.entry(row).or_insert_with(|| vec![0.0; cols]);
                entry.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// `target += scale * self`.
    pub fn accumulate_into(&self, target: &mut [f64], scale: f64) {
        match self {
            Grad::Dense(g) => target
                .iter_mut()
                .zip(g)
                .for_each(|(t, v)| *t += scale * v),
            Grad::Rows { cols, rows } => {
                for (&r, vals) in rows {
                    target[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(vals)
                        .for_each(|(t, v)| *t += scale * v);
                }
            }
        }
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        self.accumulate_into(&mut out, 1.0);
        out
    }
}

/// Parameter gradients produced by one backward pass, keyed by the key given
/// to [`Tape::param`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<usize, Grad>,
}

impl Gradients {
    pub fn get(&self, key: usize) -> Option<&Grad> {
        self.grads.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Grad)> {
        self.grads.iter().map(|(k, g)| (*k, g))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a trainable parameter without copying it.
    pub fn param(&mut self, value: &'a Tensor, key: usize) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf { key: Some(key) },
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a borrowed leaf that receives no gradient.
    pub fn frozen(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf { key: None },
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { key: None }, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (av.as_matrix(), bv.as_matrix()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: av.shape.clone(),
                    rhs: bv.shape.clone(),
                })
            }
        };
        debug_assert_eq!(k, k2);
        let out = matmul_values(&av.data, &bv.data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.as_matrix().ok_or_else(|| Error::Shape {
            op: "transpose",
            lhs: av.shape.clone(),
            rhs: vec![],
        })?;
        let out = transpose_values(&av.data, m, n);
        let needs = self.needs(a);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose(a), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::Shape {
                op,
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b), needs))
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if av.shape.len() != 2 || bv.len() != n {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut data = av.data.clone();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&bv.data).for_each(|(x, b)| *x += b);
        }
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(a, bias), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|x| x * c).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a);
        self.push(Tensor { shape, data }, Op::Scale(a, c), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|x| x.tanh()).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a);
        self.push(Tensor { shape, data }, Op::Tanh(a), needs)
    }

    /// Softmax along `axis` of a 2-D tensor (0: each column sums to one,
    /// 1: each row sums to one). A 1-D tensor accepts axis 0 only.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(a), axis)?;
        let axis = if out.shape.len() == 1 { 1 } else { axis };
        let needs = self.needs(a);
        Ok(self.push(out, Op::Softmax { x: a, axis }, needs))
    }

    /// Normalizes the whole tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = normalized(&av.data)?;
        let n = norm(&av.data);
        let shape = av.shape.clone();
        let needs = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::L2Normalize { x: a, norm: n }, needs))
    }

    /// Flattens and concatenates into a 1-D tensor.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: av.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: av.data.clone(),
        };
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    /// Embedding lookup: rows `ids` of a 2-D table, as a `len(ids) × cols`
    /// matrix. Backward scatters into the rows used.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape.len() != 2 {
            return Err(Error::Shape {
                op: "gather",
                lhs: tv.shape.clone(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, cols) = (tv.shape[0], tv.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { index: id, len: rows });
            }
            data.extend_from_slice(tv.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), cols],
                data,
            },
            Op::Gather {
                table,
                rows: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Row `i` of a matrix as a 1-D tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let rows = self.value(a).rows();
        if i >= rows {
            return Err(Error::Index { index: i, len: rows });
        }
        let g = self.gather(a, &[i])?;
        let cols = self.value(g).cols();
        self.reshape(g, &[cols])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::Shape {
                op: "dot",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let v = dot(&av.data, &bv.data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), needs))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().map(|x| x * x).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::SumSquares(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(v), Op::Sum(a), needs)
    }

    /// `-log softmax(logits)[0]`: cross-entropy with the positive in slot 0.
    pub fn sampled_softmax(&mut self, logits: Var) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() < 2 {
            return Err(Error::Contract(
                "sampled softmax needs a positive and at least one negative".into(),
            ));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("sampled softmax logits"));
        }
        let max = lv.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - lv.data[0];
        let probs = exps.iter().map(|e| e / total).collect();
        let needs = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SampledSoftmax { logits, probs }, needs))
    }

    /// Runs the reverse pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut grads = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(up) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf { key } => {
                    if let Some(k) = key {
                        grads
                            .grads
                            .entry(*k)
                            .or_insert_with(|| Grad::Dense(vec![0.0; up.len()]))
                            .add_dense(&up);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.as_matrix().expect("matmul lhs");
                    let n = bv.shape[1];
                    if self.needs(*a) {
                        // dA = dC · Bᵀ
                        let bt = transpose_values(&bv.data, k, n);
                        let da = matmul_values(&up, &bt, m, n, k);
                        self.send(&mut adj, &mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        // dB = Aᵀ · dC
                        let at = transpose_values(&av.data, m, k);
                        let db = matmul_values(&at, &up, k, m, n);
                        self.send(&mut adj, &mut grads, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.value(*a).as_matrix().expect("transpose input");
                    // output is n×m
                    let da = transpose_values(&up, n, m);
                    self.send(&mut adj, &mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        self.send(&mut adj, &mut grads, *a, up.clone());
                    }
                    if self.needs(*b) {
                        self.send(&mut adj, &mut grads, *b, up);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        let neg = up.iter().map(|x| -x).collect();
                        self.send(&mut adj, &mut grads, *b, neg);
                    }
                    if self.needs(*a) {
                        self.send(&mut adj, &mut grads, *a, up);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.needs(*bias) {
                        let n = self.value(*bias).len();
                        let mut db = vec![0.0; n];
                        for row in up.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, u)| *d += u);
                        }
                        self.send(&mut adj, &mut grads, *bias, db);
                    }
                    if self.needs(*a) {
                        self.send(&mut adj, &mut grads, *a, up);
                    }
                }
                Op::Scale(a, c) => {
                    let da = up.iter().map(|u| u * c).collect();
                    self.send(&mut adj, &mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    let da = up.iter().zip(y).map(|(u, y)| u * (1.0 - y * y)).collect();
                    self.send(&mut adj, &mut grads, *a, da);
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut da = vec![0.0; y.len()];
                    let (outer, inner, so, si) = if *axis == 1 {
                        (rows, cols, cols, 1)
                    } else {
                        (cols, rows, 1, cols)
                    };
                    for o in 0..outer {
                        let base = o * so;
                        let s: f64 = (0..inner)
                            .map(|i| up[base + i * si] * y.data[base + i * si])
                            .sum();
                        for i in 0..inner {
                            let p = base + i * si;
                            da[p] = y.data[p] * (up[p] - s);
                        }
                    }
                    self.send(&mut adj, &mut grads, *x, da);
                }
                Op::L2Normalize { x, norm } => {
                    let y = &node.value.data;
                    let yu = dot(y, &up);
                    let da = up
                        .iter()
                        .zip(y)
                        .map(|(u, yv)| (u - yv * yu) / norm)
                        .collect();
                    self.send(&mut adj, &mut grads, *x, da);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs(p) {
                            let slice = up[offset..offset + len].to_vec();
                            self.send(&mut adj, &mut grads, p, slice);
                        }
                        offset += len;
                    }
                }
                Op::Reshape(a) => self.send(&mut adj, &mut grads, *a, up),
                Op::Gather { table, rows } => {
                    let tv = self.value(*table);
                    let cols = tv.cols();
                    let tnode = &self.nodes[table.0];
                    if let Op::Leaf { key: Some(k) } = tnode.op {
                        let g = grads.grads.entry(k).or_insert_with(|| Grad::Rows {
                            cols,
                            rows: BTreeMap::new(),
                        });
                        for (i, &r) in rows.iter().enumerate() {
                            g.add_row(r, cols, &up[i * cols..(i + 1) * cols]);
                        }
                    } else {
                        let mut dt = vec![0.0; tv.len()];
                        for (i, &r) in rows.iter().enumerate() {
                            dt[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .zip(&up[i * cols..(i + 1) * cols])
                                .for_each(|(d, u)| *d += u);
                        }
                        self.send(&mut adj, &mut grads, *table, dt);
                    }
                }
                Op::Dot(a, b) => {
                    let u = up[0];
                    if self.needs(*a) {
                        let da = self.value(*b).data.iter().map(|x| x * u).collect();
                        self.send(&mut adj, &mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).data.iter().map(|x| x * u).collect();
                        self.send(&mut adj, &mut grads, *b, db);
                    }
                }
                Op::SumSquares(a) => {
                    let u = up[0];
                    let da = self.value(*a).data.iter().map(|x| 2.0 * x * u).collect();
                    self.send(&mut adj, &mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let da = vec![up[0]; self.value(*a).len()];
                    self.send(&mut adj, &mut grads, *a, da);
                }
                Op::SampledSoftmax { logits, probs } => {
                    let u = up[0];
                    let mut da: Vec<f64> = probs.iter().map(|p| p * u).collect();
                    da[0] -= u;
                    self.send(&mut adj, &mut grads, *logits, da);
                }
            }
        }
        Ok(grads)
    }

    /// Adds `g` into the adjoint of `target`. Parameter leaves are accumulated
    /// straight into the output gradients.
    fn send(
        &self,
        adj: &mut [Option<Vec<f64>>],
        grads: &mut Gradients,
        target: Var,
        g: Vec<f64>,
    ) {
        if !self.needs(target) {
            return;
        }
        if let Op::Leaf { key: Some(k) } = self.nodes[target.0].op {
            grads
                .grads
                .entry(k)
                .or_insert_with(|| Grad::Dense(vec![0.0; g.len()]))
                .add_dense(&g);
            return;
        }
        match &mut adj[target.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, stream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), gaussian_vec(&mut stream(seed, &[]), n)).unwrap()
    }

    /// Analytic gradient of `f(x)` vs central differences; returns the max
    /// relative error with a 1e-6 floor on the denominator.
    fn grad_error<F>(x: &Tensor, f: F) -> f64
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let v = tape.param(x, 0);
        let loss = f(&mut tape, v).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(0).map_or(vec![0.0; x.len()], |g| g.to_dense(x.len()));
        let eval = |p: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(p.clone());
            let l = f(&mut tape, v).unwrap();
            tape.value(l).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data[i] += h;
            let mut minus = x.clone();
            minus.data[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn matmul_hand_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
        let a = tape.constant(mat(&[&[1.0, 2.0]]));
        let b = tape.constant(mat(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 1);
        let b = random(&[7, 3], 2);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(av, bv).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.data[i * 7 + k] * b.data[k * 3 + j];
                }
                assert!((tape.value(c).data[i * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]), 0).unwrap();
        for v in s.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert_abs_diff_eq!(s.data()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.0, epsilon = 1e-12);
        let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert_abs_diff_eq!(*v, ((i + 1) as f64).exp() / z, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(s.data()[0], 0.09003, epsilon = 1e-5);
        assert_abs_diff_eq!(s.data()[1], 0.24473, epsilon = 1e-5);
        assert_abs_diff_eq!(s.data()[2], 0.66524, epsilon = 1e-5);
        assert!(matches!(
            softmax(&Tensor::vector(vec![f64::NAN, 0.0]), 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn l2_normalize_and_tanh_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(y).data()[1], 0.8, epsilon = 1e-15);
        let z = tape.constant(Tensor::vector(vec![0.0]));
        let t = tape.tanh(z);
        assert_eq!(tape.value(t).data(), &[0.0]);
        let small = tape.constant(Tensor::vector(vec![1e-13, 0.0]));
        assert!(matches!(tape.l2_normalize(small), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn l2_normalize_backward_vs_finite_differences() {
        let x = random(&[16], 4);
        let w = random(&[16], 5);
        let err = grad_error(&x, |tape, v| {
            let y = tape.l2_normalize(v)?;
            let w = tape.constant(w.clone());
            tape.dot(y, w)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_trivial_cases() {
        let x = random(&[3, 4], 6);
        let mut tape = Tape::new();
        let v = tape.param(&x, 0);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(0).unwrap().to_dense(12), vec![1.0; 12]);

        let mut tape = Tape::new();
        let v = tape.param(&x, 0);
        let s = tape.sum_squares(v);
        let g = tape.backward(s).unwrap().get(0).unwrap().to_dense(12);
        for (gi, xi) in g.iter().zip(x.data()) {
            assert_abs_diff_eq!(*gi, 2.0 * xi, epsilon = 1e-15);
        }

        let mut tape = Tape::new();
        let v = tape.param(&x, 0);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_scatters_to_used_rows() {
        let table = random(&[6, 3], 7);
        let mut tape = Tape::new();
        let t = tape.param(&table, 3);
        let g = tape.gather(t, &[4, 1, 4]).unwrap();
        let s = tape.sum(g);
        let grads = tape.backward(s).unwrap();
        match grads.get(3).unwrap() {
            Grad::Rows { rows, .. } => {
                assert_eq!(rows.keys().copied().collect::<Vec<_>>(), vec![1, 4]);
                assert_eq!(rows[&4], vec![2.0; 3]);
                assert_eq!(rows[&1], vec![1.0; 3]);
            }
            other => panic!("expected sparse rows, got {other:?}"),
        }
        let mut tape = Tape::new();
        let t = tape.param(&table, 0);
        assert!(matches!(tape.gather(t, &[6]), Err(Error::Index { .. })));
    }

    #[test]
    fn sampled_softmax_symmetric_logits() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![0.7, 0.7]));
        let loss = tape.sampled_softmax(l).unwrap();
        assert_abs_diff_eq!(tape.value(loss).item(), std::f64::consts::LN_2, epsilon = 1e-15);
    }

    /// Max FD error over 100 random instances of each op.
    #[test]
    fn every_op_matches_finite_differences() {
        type Build = Box<dyn Fn(&mut Tape, Var, &Tensor) -> Result<Var>>;
        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("matmul_lhs", vec![3, 4], Box::new(|t, v, w| {
                let b = t.constant(Tensor::new(vec![4, 2], w.data()[..8].to_vec())?);
                let c = t.matmul(v, b)?;
                let c = t.tanh(c);
                Ok(t.sum(c))
            })),
            ("matmul_rhs", vec![4, 2], Box::new(|t, v, w| {
                let a = t.constant(Tensor::new(vec![3, 4], w.data()[..12].to_vec())?);
                let c = t.matmul(a, v)?;
                Ok(t.sum_squares(c))
            })),
            ("transpose", vec![3, 2], Box::new(|t, v, w| {
                let tr = t.transpose(v)?;
                let c = t.constant(Tensor::new(vec![2, 3], w.data()[..6].to_vec())?);
                t.dot(tr, c)
            })),
            ("add_sub", vec![5], Box::new(|t, v, w| {
                let c = t.constant(Tensor::vector(w.data()[..5].to_vec()));
                let a = t.add(v, c)?;
                let b = t.sub(c, v)?;
                let p = t.dot(a, b)?;
                let s = t.sum_squares(a);
                t.add(p, s)
            })),
            ("add_bias", vec![4], Box::new(|t, v, w| {
                let m = t.constant(Tensor::new(vec![3, 4], w.data()[..12].to_vec())?);
                let y = t.add_bias(m, v)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            })),
            ("scale_tanh", vec![6], Box::new(|t, v, w| {
                let s = t.scale(v, -1.7);
                let y = t.tanh(s);
                let c = t.constant(Tensor::vector(w.data()[..6].to_vec()));
                t.dot(y, c)
            })),
            ("softmax_axis0", vec![4, 3], Box::new(|t, v, w| {
                let s = t.softmax(v, 0)?;
                let c = t.constant(Tensor::new(vec![4, 3], w.data()[..12].to_vec())?);
                t.dot(s, c)
            })),
            ("softmax_axis1", vec![4, 3], Box::new(|t, v, w| {
                let s = t.softmax(v, 1)?;
                let c = t.constant(Tensor::new(vec![4, 3], w.data()[..12].to_vec())?);
                t.dot(s, c)
            })),
            ("l2_normalize", vec![7], Box::new(|t, v, w| {
                let y = t.l2_normalize(v)?;
                let c = t.constant(Tensor::vector(w.data()[..7].to_vec()));
                t.dot(y, c)
            })),
            ("concat_reshape", vec![2, 3], Box::new(|t, v, w| {
                let c = t.constant(Tensor::vector(w.data()[..2].to_vec()));
                let flat = t.concat(&[c, v, v]);
                let m = t.reshape(flat, &[2, 7])?;
                let m = t.tanh(m);
                Ok(t.sum(m))
            })),
            ("gather_row", vec![5, 3], Box::new(|t, v, _| {
                let g = t.gather(v, &[3, 0, 3])?;
                let r = t.row(v, 2)?;
                let g = t.tanh(g);
                let a = t.sum(g);
                let b = t.sum_squares(r);
                t.add(a, b)
            })),
            ("sampled_softmax", vec![6], Box::new(|t, v, _| t.sampled_softmax(v))),
        ];
        for (name, shape, build) in &cases {
            let mut worst: f64 = 0.0;
            for i in 0..100 {
                let x = random(shape, 1000 + i);
                let w = random(&[16], 5000 + i);
                worst = worst.max(grad_error(&x, |t, v| build(t, v, &w)));
            }
            assert!(worst < 1e-4, "{name}: max relative error {worst}");
        }
    }

    /// Backprop through a 2-layer MLP equals chaining the backward of its two
    /// halves at the hidden layer.
    #[test]
    fn composite_backward_splits_at_hidden_layer() {
        let x = random(&[2, 3], 20);
        let w1 = random(&[3, 5], 21);
        let w2 = random(&[5, 2], 22);

        let mut tape = Tape::new();
        let (xv, w1v, w2v) = (tape.constant(x.clone()), tape.param(&w1, 0), tape.param(&w2, 1));
        let h = tape.matmul(xv, w1v).unwrap();
        let h = tape.tanh(h);
        let y = tape.matmul(h, w2v).unwrap();
        let loss = tape.sum_squares(y);
        let full = tape.backward(loss).unwrap();

        // upper half: hidden activations as a parameter
        let mut tape = Tape::new();
        let hidden = {
            let mut t = Tape::new();
            let (xv, w1v) = (t.constant(x.clone()), t.constant(w1.clone()));
            let h = t.matmul(xv, w1v).unwrap();
            let h = t.tanh(h);
            t.value(h).clone()
        };
        let hv = tape.param(&hidden, 0);
        let w2v = tape.constant(w2.clone());
        let y = tape.matmul(hv, w2v).unwrap();
        let loss = tape.sum_squares(y);
        let upper = tape.backward(loss).unwrap().get(0).unwrap().to_dense(10);

        // lower half: pull the hidden adjoint back through tanh and matmul
        let mut tape = Tape::new();
        let (xv, w1v) = (tape.constant(x.clone()), tape.param(&w1, 0));
        let h = tape.matmul(xv, w1v).unwrap();
        let h = tape.tanh(h);
        let up = tape.constant(Tensor::new(vec![2, 5], upper).unwrap());
        let loss = tape.dot(h, up).unwrap();
        let lower = tape.backward(loss).unwrap().get(0).unwrap().to_dense(15);

        let direct = full.get(0).unwrap().to_dense(15);
        for (a, b) in direct.iter().zip(&lower) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let x = Tensor::new(vec![3, 4], vals).unwrap();
            for axis in 0..2 {
                let s = softmax(&x, axis).unwrap();
                prop_assert!(s.data().iter().all(|v| *v >= 0.0));
                let (outer, inner) = if axis == 1 { (3, 4) } else { (4, 3) };
                for o in 0..outer {
                    let sum: f64 = (0..inner)
                        .map(|i| if axis == 1 { s.data()[o * 4 + i] } else { s.data()[i * 4 + o] })
                        .sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn l2_normalize_is_idempotent(vals in proptest::collection::vec(-10.0f64..10.0, 8)) {
            prop_assume!(norm(&vals) > 1e-6);
            let once = normalized(&vals).unwrap();
            let twice = normalized(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
