//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in creation order, which is a topological order, and
//! `backward` walks them in reverse. Gradient contributions are summed in that
//! fixed order so repeated runs are bitwise identical.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_at, matmul_bt, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Abs(Var),
    Recip(Var),
    LayerNorm(Var, f64),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    L2NormRows(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph over [`Tensor`]s.
///
/// A graph built with [`Graph::no_grad`] binds parameters as constants and
/// records no backward structure.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<usize, Var>,
    track_params: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
    let th = inner.tanh();
    let dinner = T::lit(SQRT_2_OVER_PI) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * dinner
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new(), track_params: true }
    }

    /// Graph whose parameters are bound as constants; nothing is differentiable.
    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), params: BTreeMap::new(), track_params: false }
    }

    /// Whether parameters bound on this graph receive gradients.
    pub fn tracks_params(&self) -> bool {
        self.track_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter. Repeated binds return the same node so that
    /// every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.index()) {
            return v;
        }
        self.nodes.push(Node { value: store.shared(id), op: Op::Leaf, requires_grad: self.track_params });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id.index(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Same forward value (shared storage), no gradient path.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = Arc::clone(&self.nodes[x.0].value);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let v = matmul(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// `a (r x c) + row (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(Error::shape("add_row", format!("{sa:?} + {sr:?}")));
        }
        let mut v = self.value(a).clone();
        let cols = sa.1;
        let rv = self.value(row).data().to_vec();
        for chunk in v.data_mut().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(&rv) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `a (r x c) * col (r x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(Error::shape("mul_col", format!("{sa:?} * {sc:?}")));
        }
        let mut v = self.value(a).clone();
        let cv = self.value(col).data().to_vec();
        for (chunk, &s) in v.data_mut().chunks_mut(sa.1).zip(&cv) {
            for x in chunk.iter_mut() {
                *x *= s;
            }
        }
        Ok(self.push(v, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = T::lit(s);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_fwd);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.recip());
        self.push(v, Op::Recip(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let n = T::lit(cols as f64);
        let e = T::lit(eps);
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = (var + e).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(out, Op::LayerNorm(a, eps), &[a])
    }

    /// Layer norm followed by per-column scale and shift (`1 x c` rows).
    pub fn layer_norm_affine(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm(a, eps);
        let rows = self.shape(a).0;
        let ones = self.constant(Tensor::full(rows, 1, T::one()));
        let g = self.matmul(ones, gamma)?;
        let scaled = self.mul(n, g)?;
        self.add_row(scaled, beta)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let v = Tensor::new(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        if values.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let v = Tensor::vstack(&values).map_err(|_| Error::shape("concat_rows", "column counts differ"))?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let w = end - start;
        let x = self.value(a);
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&x.row_slice(i)[start..end]);
        }
        let v = Tensor::new(r, w, data)?;
        Ok(self.push(v, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let v = Tensor::new(end - start, c, self.value(a).data()[start * c..end * c].to_vec())?;
        Ok(self.push(v, Op::SliceRows(a, start), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Per-row sum, `r x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data: Vec<T> = x.data().chunks(x.cols()).map(|r| r.iter().copied().sum()).collect();
        let v = Tensor::new(x.rows(), 1, data).expect("row count positive");
        self.push(v, Op::SumRows(a), &[a])
    }

    /// Per-row `sqrt(sum x^2 + eps)`, `r x 1`.
    pub fn l2norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let e = T::lit(eps);
        let data: Vec<T> = x.data().chunks(x.cols()).map(|r| (r.iter().map(|&v| v * v).sum::<T>() + e).sqrt()).collect();
        let v = Tensor::new(x.rows(), 1, data).expect("row count positive");
        self.push(v, Op::L2NormRows(a), &[a])
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.shape(root) != (1, 1) {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(T::one()));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &node.op, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn propagate(&self, idx: usize, op: &Op, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let mut acc = |v: Var, contrib: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &self.nodes[idx].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, matmul_bt(g, val(*b)));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, matmul_at(val(*a), g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let cols = g.cols();
                let mut r = vec![T::zero(); cols];
                for chunk in g.data().chunks(cols) {
                    for (s, &x) in r.iter_mut().zip(chunk) {
                        *s += x;
                    }
                }
                acc(*row, Tensor::row(r));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::MulCol(a, col) => {
                let cols = g.cols();
                let cv = val(*col);
                let mut ga = g.clone();
                for (chunk, &s) in ga.data_mut().chunks_mut(cols).zip(cv.data()) {
                    for x in chunk.iter_mut() {
                        *x *= s;
                    }
                }
                acc(*a, ga);
                let av = val(*a);
                let gc: Vec<T> = g
                    .data()
                    .chunks(cols)
                    .zip(av.data().chunks(cols))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(&x, &y)| x * y).sum())
                    .collect();
                acc(*col, Tensor::new(g.rows(), 1, gc).expect("shape"));
            }
            Op::Scale(a, s) => {
                let k = T::lit(*s);
                acc(*a, g.map(|x| x * k));
            }
            Op::Tanh(a) => acc(*a, g.zip_map(out, |x, y| x * (T::one() - y * y))),
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |x, y| x * gelu_grad(y))),
            Op::Abs(a) => acc(*a, g.zip_map(val(*a), |x, y| x * y.signum() * if y == T::zero() { T::zero() } else { T::one() })),
            Op::Recip(a) => acc(*a, g.zip_map(out, |x, y| -x * y * y)),
            Op::LayerNorm(a, eps) => {
                let x = val(*a);
                let cols = x.cols();
                let n = T::lit(cols as f64);
                let e = T::lit(*eps);
                let mut dx = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x.data().chunks(cols).zip(out.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let mean = xr.iter().copied().sum::<T>() / n;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                    let inv = (var + e).sqrt().recip();
                    let gm = gr.iter().copied().sum::<T>() / n;
                    let gy = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum::<T>() / n;
                    dx.extend(gr.iter().zip(yr).map(|(&u, &v)| inv * (u - gm - v * gy)));
                }
                acc(*a, Tensor::new(x.rows(), cols, dx).expect("shape"));
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut dx = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot = yr.iter().zip(gr).map(|(&y, &u)| y * u).sum::<T>();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &u)| y * (u - dot)));
                }
                acc(*a, Tensor::new(out.rows(), cols, dx).expect("shape"));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.nodes[p.0].requires_grad {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        acc(p, Tensor::new(g.rows(), w, data).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.nodes[p.0].requires_grad {
                        let data = g.data()[offset * cols..(offset + h) * cols].to_vec();
                        acc(p, Tensor::new(h, cols, data).expect("shape"));
                    }
                    offset += h;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let w = g.cols();
                let mut full = Tensor::zeros(r, c);
                for i in 0..r {
                    full.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                acc(*a, full);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut full = Tensor::zeros(r, c);
                full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, full);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item() / T::lit((r * c) as f64)));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut data = Vec::with_capacity(r * c);
                for &s in g.data() {
                    data.extend(std::iter::repeat_n(s, c));
                }
                acc(*a, Tensor::new(r, c, data).expect("shape"));
            }
            Op::L2NormRows(a) => {
                let x = val(*a);
                let c = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for ((xr, &n), &gs) in x.data().chunks(c).zip(out.data()).zip(g.data()) {
                    data.extend(xr.iter().map(|&v| gs * v / n));
                }
                acc(*a, Tensor::new(x.rows(), c, data).expect("shape"));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<usize, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id.index()).and_then(|v| self.wrt(*v))
    }

    /// Gradients of every bound parameter that received one, by id order.
    pub fn into_param_grads(mut self) -> ParamGrads<T> {
        let mut out = BTreeMap::new();
        for (&pid, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(pid, g);
            }
        }
        ParamGrads { grads: out }
    }
}

/// Parameter gradients detached from their graph.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id.index())
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        self.grads.insert(id.index(), g);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum, for accumulating over several graphs.
    pub fn accumulate(&mut self, other: ParamGrads<T>) {
        for (k, g) in other.grads {
            match self.grads.get_mut(&k) {
                Some(e) => e.add_assign(&g),
                None => {
                    self.grads.insert(k, g);
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}
