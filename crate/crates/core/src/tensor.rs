//! Dense tensors with a reverse-mode tape.
//!
//! Values on a [`Tape`] are row-major matrices addressed by [`Var`] handles;
//! vectors are `1 x n` rows. Trainable tensors live in a [`ParamStore`] and
//! enter a tape either whole ([`Tape::param`]) or as selected rows
//! ([`Tape::gather`]); [`Tape::backward`] returns their gradients as
//! [`ParamGrads`] so several tapes can be reduced into one accumulator.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            data: (0..n).map(&mut f).collect(),
            shape,
            requires_grad: false,
            grad: None,
        }
    }

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

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Rows and columns when viewed as a matrix (last dimension = columns).
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&cols, rest)) => (rest.iter().product(), cols),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.matrix_dims();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let (_, cols) = self.matrix_dims();
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named registry of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                t.accumulate_grad(g);
            }
        }
    }

    /// Sum of squared Frobenius norms over every parameter.
    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::squared_norm).sum()
    }
}

/// Dense per-parameter gradients produced by one tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn slot(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Adds `coeff * W` to every parameter's gradient (the gradient of
    /// `coeff / 2 * sum ||W||^2`).
    pub fn add_scaled_params(&mut self, store: &ParamStore, coeff: f64) {
        for (id, t) in store.tensors.iter().enumerate() {
            let g = self.slot(ParamId(id), t.numel());
            g.iter_mut().zip(&t.data).for_each(|(g, w)| *g += coeff * w);
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(theirs) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(theirs).for_each(|(a, b)| *a += b),
                    None => *mine = Some(theirs.clone()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        param: ParamId,
        rows: Vec<Option<usize>>,
    },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    leaf_grads: HashMap<usize, Vec<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            leaf_grads: HashMap::new(),
        }
    }

    /// A tape that never tracks gradients (evaluation).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("consistent node")
    }

    /// Gradient of a standalone leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// A leaf from a tensor (matrix view: last dimension = columns).
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (rows, cols) = t.matrix_dims();
        self.push(t.data.clone(), rows, cols, Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "constant",
                format!("{rows}x{cols} from {} values", data.len()),
            ));
        }
        Ok(self.push(data, rows, cols, Op::Leaf, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(vec![0.0; rows * cols], rows, cols, Op::Leaf, false)
    }

    /// A whole parameter as one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (rows, cols) = t.matrix_dims();
        self.push(t.data.clone(), rows, cols, Op::Param(id), t.requires_grad)
    }

    /// Selected rows of a parameter; `None` yields a zero row that receives no gradient.
    pub fn gather(&mut self, store: &ParamStore, id: ParamId, rows: &[Option<usize>]) -> Result<Var> {
        let t = store.get(id);
        let (n_rows, cols) = t.matrix_dims();
        let mut value = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            match r {
                Some(r) if *r < n_rows => value.extend_from_slice(t.row(*r)),
                Some(r) => {
                    return Err(shape_err("gather", format!("row {r} out of {n_rows}")));
                }
                None => value.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        let requires_grad = t.requires_grad && rows.iter().any(Option::is_some);
        Ok(self.push(
            value,
            rows.len(),
            cols,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
            },
            requires_grad,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, p) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} by {k2}x{p}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for kk in 0..k {
                let aik = av[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * p..(kk + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, m, p, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` for `a: m x k`, `b: p x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (p, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("{m}x{k} by ({p}x{k2})^T")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..p {
                out[i * p + j] = dot(arow, &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, m, p, Op::MatMulNT(a, b), rg))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, r, c, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, r, c, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.dims(x);
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(out, r, cols, Op::Scale(x, c), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(out, r, c, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.value(x).iter().find(|v| !(**v > 0.0)) {
            return Err(Error::NonPositiveLog(bad));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    /// Row-wise softmax over entries where `mask` is true; masked entries are
    /// exactly zero and rows without any true entry are all zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if mask.len() != rows * cols {
            return Err(shape_err(
                "masked_softmax",
                format!("mask of {} for {rows}x{cols}", mask.len()),
            ));
        }
        let x = self.value(logits);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mr = &mask[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (&v, &m) in xr.iter().zip(mr) {
                if m {
                    if v.is_nan() {
                        return Err(Error::NaN("masked_softmax"));
                    }
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for ((o, &v), &m) in orow.iter_mut().zip(xr).zip(mr) {
                if m {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= sum);
        }
        let rg = self.rg(logits);
        Ok(self.push(out, rows, cols, Op::MaskedSoftmax(logits), rg))
    }

    /// Row-wise layer normalization with learned `gain` and `bias` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if cols < 2 {
            return Err(shape_err("layer_norm", format!("need at least 2 columns, got {cols}")));
        }
        if self.dims(gain) != (1, cols) || self.dims(bias) != (1, cols) {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {cols}",
                    self.dims(gain),
                    self.dims(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &xv[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..cols {
                let h = (xr[c] - mean) * s;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = if rg {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            }
        } else {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: Vec::new(),
                rstd: Vec::new(),
            }
        };
        Ok(self.push(out, rows, cols, op, rg))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1 / (1 - rate)`; otherwise identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut SplitMix64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.dims(x);
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..r * c)
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&scale).map(|(v, s)| v * s).collect();
        let rg = self.rg(x);
        Ok(self.push(out, r, c, Op::Dropout { x, scale }, rg))
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.dims(p).0)
            .ok_or_else(|| shape_err("concat", "no parts".into()))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).0 != rows) {
            return Err(shape_err("concat", format!("{rows} rows vs {:?}", self.dims(bad))));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * pc..(r + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, rows, cols, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks parts vertically; all parts must have the same column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.dims(p).1)
            .ok_or_else(|| shape_err("concat_rows", "no parts".into()))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).1 != cols) {
            return Err(shape_err("concat_rows", format!("{cols} cols vs {:?}", self.dims(bad))));
        }
        let rows: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, rows, cols, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenation of two row vectors (or matrices) along the last dimension.
    pub fn concat_last_dim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.concat_cols(&[a, b])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("{start}+{len} of {cols}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, rows, len, Op::SliceCols { x, start }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![s], 1, 1, Op::SumAll(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. Standalone leaf gradients are kept
    /// on the tape ([`Tape::grad`]); parameter gradients are returned.
    pub fn backward(&mut self, loss: Var, store: &ParamStore) -> Result<ParamGrads> {
        if self.dims(loss) != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.dims(loss)),
            ));
        }
        let mut out = ParamGrads::zeros_like(store);
        if !self.rg(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let cols = node.cols;
            match &node.op {
                Op::Leaf => {
                    self.leaf_grads
                        .entry(id)
                        .and_modify(|e| e.iter_mut().zip(&g).for_each(|(a, b)| *a += b))
                        .or_insert(g);
                }
                Op::Param(p) => {
                    let slot = out.slot(*p, g.len());
                    slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Gather { param, rows } => {
                    let len = store.get(*param).numel();
                    let slot = out.slot(*param, len);
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = r {
                            let dst = &mut slot[r * cols..(r + 1) * cols];
                            dst.iter_mut()
                                .zip(&g[i * cols..(i + 1) * cols])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.dims(a);
                    let p = self.dims(b).1;
                    if self.rg(a) {
                        // dA = dOut * B^T
                        let bv = self.value(b);
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * p..(i + 1) * p];
                            for kk in 0..k {
                                da[i * k + kk] = dot(grow, &bv[kk * p..(kk + 1) * p]);
                            }
                        }
                        accumulate(&mut grads, a, &da);
                    }
                    if self.rg(b) {
                        // dB = A^T * dOut
                        let av = self.value(a);
                        let mut db = vec![0.0; k * p];
                        for i in 0..m {
                            let grow = &g[i * p..(i + 1) * p];
                            for kk in 0..k {
                                let aik = av[i * k + kk];
                                if aik == 0.0 {
                                    continue;
                                }
                                db[kk * p..(kk + 1) * p]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(d, x)| *d += aik * x);
                            }
                        }
                        accumulate(&mut grads, b, &db);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.dims(a);
                    let p = self.dims(b).0;
                    if self.rg(a) {
                        // dA = dOut * B
                        let bv = self.value(b);
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let drow = &mut da[i * k..(i + 1) * k];
                            for j in 0..p {
                                let gij = g[i * p + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                drow.iter_mut()
                                    .zip(&bv[j * k..(j + 1) * k])
                                    .for_each(|(d, x)| *d += gij * x);
                            }
                        }
                        accumulate(&mut grads, a, &da);
                    }
                    if self.rg(b) {
                        // dB = dOut^T * A
                        let av = self.value(a);
                        let mut db = vec![0.0; p * k];
                        for i in 0..m {
                            let arow = &av[i * k..(i + 1) * k];
                            for j in 0..p {
                                let gij = g[i * p + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                db[j * k..(j + 1) * k]
                                    .iter_mut()
                                    .zip(arow)
                                    .for_each(|(d, x)| *d += gij * x);
                            }
                        }
                        accumulate(&mut grads, b, &db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        accumulate(&mut grads, a, &g);
                    }
                    if self.rg(b) {
                        accumulate(&mut grads, b, &g);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        let d: Vec<f64> = g.iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, a, &d);
                    }
                    if self.rg(b) {
                        let d: Vec<f64> = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, b, &d);
                    }
                }
                Op::Scale(x, c) => {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *x, &d);
                }
                Op::Relu(x) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &d);
                }
                Op::Tanh(x) => {
                    let d: Vec<f64> = g.iter().zip(&node.value).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *x, &d);
                }
                Op::Sigmoid(x) => {
                    let d: Vec<f64> = g.iter().zip(&node.value).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *x, &d);
                }
                Op::Log(x) => {
                    let d: Vec<f64> = g.iter().zip(self.value(*x)).map(|(gv, xv)| gv / xv).collect();
                    accumulate(&mut grads, *x, &d);
                }
                Op::Clamp { x, lo, hi } => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(gv, &xv)| if xv >= *lo && xv <= *hi { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &d);
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let rows = node.rows;
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inner = dot(yr, gr);
                        for c in 0..cols {
                            d[r * cols + c] = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *x, &d);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let rows = node.rows;
                    if self.rg(bias) {
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            db.iter_mut()
                                .zip(&g[r * cols..(r + 1) * cols])
                                .for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, bias, &db);
                    }
                    if self.rg(gain) {
                        let mut dg = vec![0.0; cols];
                        for i in 0..rows * cols {
                            dg[i % cols] += g[i] * xhat[i];
                        }
                        accumulate(&mut grads, gain, &dg);
                    }
                    if self.rg(x) {
                        let gv = self.value(gain);
                        let mut dx = vec![0.0; rows * cols];
                        let n = cols as f64;
                        for r in 0..rows {
                            let range = r * cols..(r + 1) * cols;
                            let dxhat: Vec<f64> = g[range.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                            let xh = &xhat[range.clone()];
                            let mean_d = dxhat.iter().sum::<f64>() / n;
                            let mean_dx = dot(&dxhat, xh) / n;
                            for c in 0..cols {
                                dx[r * cols + c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                        accumulate(&mut grads, x, &dx);
                    }
                }
                Op::Dropout { x, scale } => {
                    let d: Vec<f64> = g.iter().zip(scale).map(|(a, b)| a * b).collect();
                    accumulate(&mut grads, *x, &d);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.dims(p).1;
                        if self.rg(p) {
                            let mut d = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                            }
                            accumulate(&mut grads, p, &d);
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.node(p).value.len();
                        if self.rg(p) {
                            accumulate(&mut grads, p, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, xc) = self.dims(*x);
                    let mut d = vec![0.0; rows * xc];
                    for r in 0..rows {
                        d[r * xc + start..r * xc + start + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                    accumulate(&mut grads, *x, &d);
                }
                Op::SumAll(x) => {
                    let (r, c) = self.dims(*x);
                    accumulate(&mut grads, *x, &vec![g[0]; r * c]);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
