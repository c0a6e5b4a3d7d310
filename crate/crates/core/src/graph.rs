//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are
//! borrowed from a [`ParamStore`]; [`Graph::backward`] returns gradients in
//! store order.

use std::borrow::Cow;
use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::ones((rows, cols)))
    }

    /// Glorot-uniform weights.
    pub fn xavier<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let m = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit));
        self.add(name, m)
    }

    /// Gaussian rows scaled to unit norm.
    pub fn unit_rows<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let mut m = Mat::zeros((rows, cols));
        for mut row in m.rows_mut() {
            fill_unit(row.as_slice_mut().expect("standard layout"), rng);
        }
        self.add(name, m)
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect()
    }

    /// sha256 over names, shapes and value bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            h.update([0]);
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        crate::config::hex(&h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn fill_unit<R: Rng>(row: &mut [f64], rng: &mut R) {
    loop {
        for x in row.iter_mut() {
            *x = StandardNormal.sample(rng);
        }
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            row.iter_mut().for_each(|x| *x /= n);
            return;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    Sigmoid(Var),
    /// per-row inverse standard deviation
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    CosineRows(Var, Var),
    Cosine(Var, Var),
    MaskedMse(Var, Vec<f64>, Vec<f64>, f64),
    Sum(Var),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
    needs_grad: bool,
}

pub const LN_EPS: f64 = 1e-5;

/// Tape for one forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    memo: Vec<Option<Var>>,
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2)) + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(256), memo: vec![None; params.len()] }
    }

    fn push(&mut self, value: Cow<'p, Mat>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b)
            | Op::CosineRows(a, b)
            | Op::Cosine(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(|v| self.nodes[v.0].needs_grad),
            Op::Affine(a, _)
            | Op::MulConst(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::LayerNorm(a, _)
            | Op::Softmax(a)
            | Op::Transpose(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::SelectRows(a, _)
            | Op::SelectCols(a, _)
            | Op::MaskedMse(a, ..)
            | Op::Sum(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = self.value(v);
        (m.nrows(), m.ncols())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(Cow::Owned(m), Op::Leaf)
    }

    pub fn input(&mut self, m: &'p Mat) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.memo[id.0] {
            return v;
        }
        let v = self.push(Cow::Borrowed(self.params.get(id)), Op::Param(id));
        self.memo[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Cow::Owned(out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a) - self.value(b);
        self.push(Cow::Owned(out), Op::Sub(a, b))
    }

    /// `a [n×m] + b [1×m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b), (1, self.shape(a).1), "row broadcast mismatch");
        let out = self.value(a) + self.value(b);
        self.push(Cow::Owned(out), Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        self.push(Cow::Owned(out), Op::Mul(a, b))
    }

    /// `a [n×m] * b [1×m]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(b), (1, self.shape(a).1), "row broadcast mismatch");
        let out = self.value(a) * self.value(b);
        self.push(Cow::Owned(out), Op::MulRow(a, b))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).mapv(|x| scale * x + shift);
        self.push(Cow::Owned(out), Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let out = self.value(a) * &m;
        self.push(Cow::Owned(out), Op::MulConst(a, m))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(Cow::Owned(out), Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(Cow::Owned(out), Op::Sigmoid(a))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let mu = row.sum() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mu) * is);
            inv.push(is);
        }
        self.push(Cow::Owned(out), Op::LayerNorm(a, inv))
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get weight 0.
    /// Panics if a row has no attendable column; callers check first.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
            let mx = row
                .iter()
                .enumerate()
                .filter(|(j, _)| keep(*j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(mx.is_finite() || mx == f64::INFINITY, "softmax over fully masked row");
            let mut z = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { (*v - mx).exp() } else { 0.0 };
                z += *v;
            }
            row.mapv_inplace(|v| v / z);
        }
        self.push(Cow::Owned(out), Op::Softmax(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(Cow::Owned(out), Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, vs: &[Var]) -> Var {
        let views: Vec<_> = vs.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(Cow::Owned(out), Op::ConcatRows(vs.to_vec()))
    }

    pub fn concat_cols(&mut self, vs: &[Var]) -> Var {
        let views: Vec<_> = vs.iter().map(|v| self.value(*v).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(Cow::Owned(out), Op::ConcatCols(vs.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(Cow::Owned(out), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Cow::Owned(out), Op::SliceCols(a, start))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = row_major(self.value(a), rows, cols);
        self.push(Cow::Owned(out), Op::Reshape(a))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        self.push(Cow::Owned(out), Op::SelectRows(a, idx.to_vec()))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(1), idx);
        self.push(Cow::Owned(out), Op::SelectCols(a, idx.to_vec()))
    }

    /// Cosine of `q [1×d]` against every row of `w [n×d]`, giving `[1×n]`.
    /// Zero-norm operands give similarity 0.
    pub fn cosine_rows(&mut self, q: Var, w: Var) -> Var {
        let (qv, wv) = (self.value(q), self.value(w));
        let qn = norm(qv.iter().copied());
        let out = Mat::from_shape_fn((1, wv.nrows()), |(_, k)| {
            let row = wv.row(k);
            let wn = norm(row.iter().copied());
            if qn == 0.0 || wn == 0.0 {
                0.0
            } else {
                qv.row(0).dot(&row) / (qn * wn)
            }
        });
        self.push(Cow::Owned(out), Op::CosineRows(q, w))
    }

    /// Cosine of two `[1×d]` rows as `[1×1]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (an, bn) = (norm(av.iter().copied()), norm(bv.iter().copied()));
        let c = if an == 0.0 || bn == 0.0 { 0.0 } else { av.row(0).dot(&bv.row(0)) / (an * bn) };
        self.push(Cow::Owned(Mat::from_elem((1, 1), c)), Op::Cosine(a, b))
    }

    /// `Σ mask (target - pred)² / Σ mask` for `pred [1×T]`. The caller makes
    /// sure `Σ mask > 0`.
    pub fn masked_mse(&mut self, pred: Var, target: &[f64], mask: &[f64]) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), target.len());
        let o: f64 = mask.iter().sum();
        assert!(o > 0.0, "masked_mse with empty mask");
        let sse: f64 = p.iter().zip(target).zip(mask).map(|((p, t), m)| m * (t - p) * (t - p)).sum();
        self.push(
            Cow::Owned(Mat::from_elem((1, 1), sse / o)),
            Op::MaskedMse(pred, target.to_vec(), mask.to_vec(), o),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Cow::Owned(Mat::from_elem((1, 1), s)), Op::Sum(a))
    }

    /// Affine map `x W + b` with `b` a `[1×n]` row.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (self.param(w), self.param(b));
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Gradients of `Σ weight · seed` with respect to every parameter, in
    /// store order. Parameters the seeds do not reach get zeros.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Vec<Mat> {
        let mut out = self.params.zeros_like();
        self.backward_into(seeds, &mut out);
        out
    }

    /// Accumulate into `out` (store order).
    pub fn backward_into(&self, seeds: &[(Var, f64)], out: &mut [Mat]) {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for &(v, w) in seeds {
            let g = Mat::from_elem(self.value(v).raw_dim(), w);
            acc(&mut grads[v.0], g);
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let need = |v: &Var| self.nodes[v.0].needs_grad;
            let val = |v: &Var| &*self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out[id.0] += &g,
                Op::MatMul(a, b) => {
                    if need(a) {
                        acc(&mut grads[a.0], g.dot(&val(b).t()));
                    }
                    if need(b) {
                        acc(&mut grads[b.0], val(a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if need(b) {
                        acc(&mut grads[b.0], g.clone());
                    }
                    if need(a) {
                        acc(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(b) {
                        acc(&mut grads[b.0], -&g);
                    }
                    if need(a) {
                        acc(&mut grads[a.0], g);
                    }
                }
                Op::AddRow(a, b) => {
                    if need(b) {
                        acc(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(a) {
                        acc(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if need(a) {
                        acc(&mut grads[a.0], &g * val(b));
                    }
                    if need(b) {
                        acc(&mut grads[b.0], &g * val(a));
                    }
                }
                Op::MulRow(a, b) => {
                    if need(b) {
                        acc(&mut grads[b.0], (&g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need(a) {
                        acc(&mut grads[a.0], &g * val(b));
                    }
                }
                Op::Affine(a, c) => acc(&mut grads[a.0], g * *c),
                Op::MulConst(a, m) => acc(&mut grads[a.0], g * m),
                Op::Gelu(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(a), |gv, x| *gv *= gelu_grad(*x));
                    acc(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |gv, s| *gv *= s * (1.0 - s));
                    acc(&mut grads[a.0], d);
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut d = g;
                    for ((mut grow, yrow), is) in d.rows_mut().into_iter().zip(y.rows()).zip(inv) {
                        let mg = grow.sum() / n;
                        let mgy = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        grow.zip_mut_with(&yrow, |gv, yv| *gv = is * (*gv - mg - yv * mgy));
                    }
                    acc(&mut grads[a.0], d);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut d = g;
                    for (mut grow, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                        let dot = grow.dot(&prow);
                        grow.zip_mut_with(&prow, |gv, pv| *gv = pv * (*gv - dot));
                    }
                    acc(&mut grads[a.0], d);
                }
                Op::Transpose(a) => acc(&mut grads[a.0], g.t().to_owned()),
                Op::ConcatRows(vs) => {
                    let mut off = 0;
                    for v in vs {
                        let r = val(v).nrows();
                        if need(v) {
                            acc(&mut grads[v.0], g.slice(s![off..off + r, ..]).to_owned());
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(vs) => {
                    let mut off = 0;
                    for v in vs {
                        let c = val(v).ncols();
                        if need(v) {
                            acc(&mut grads[v.0], g.slice(s![.., off..off + c]).to_owned());
                        }
                        off += c;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(val(a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads[a.0], d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(val(a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads[a.0], d);
                }
                Op::Reshape(a) => {
                    let (r, c) = (val(a).nrows(), val(a).ncols());
                    acc(&mut grads[a.0], row_major(&g, r, c));
                }
                Op::SelectRows(a, idx) => {
                    let mut d = Mat::zeros(val(a).raw_dim());
                    for (k, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(k);
                    }
                    acc(&mut grads[a.0], d);
                }
                Op::SelectCols(a, idx) => {
                    let mut d = Mat::zeros(val(a).raw_dim());
                    for (k, &j) in idx.iter().enumerate() {
                        let mut col = d.column_mut(j);
                        col += &g.column(k);
                    }
                    acc(&mut grads[a.0], d);
                }
                Op::CosineRows(q, w) => {
                    let (qv, wv) = (val(q), val(w));
                    let qn = norm(qv.iter().copied());
                    let mut gq = Mat::zeros(qv.raw_dim());
                    let mut gw = Mat::zeros(wv.raw_dim());
                    for k in 0..wv.nrows() {
                        let gk = g[[0, k]];
                        let row = wv.row(k);
                        let wn = norm(row.iter().copied());
                        if gk == 0.0 || qn == 0.0 || wn == 0.0 {
                            continue;
                        }
                        let c = node.value[[0, k]];
                        for j in 0..qv.ncols() {
                            gq[[0, j]] += gk * (row[j] / (qn * wn) - c * qv[[0, j]] / (qn * qn));
                            gw[[k, j]] += gk * (qv[[0, j]] / (qn * wn) - c * row[j] / (wn * wn));
                        }
                    }
                    if need(q) {
                        acc(&mut grads[q.0], gq);
                    }
                    if need(w) {
                        acc(&mut grads[w.0], gw);
                    }
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (val(a), val(b));
                    let (an, bn) = (norm(av.iter().copied()), norm(bv.iter().copied()));
                    if an > 0.0 && bn > 0.0 {
                        let c = node.value[[0, 0]];
                        let g0 = g[[0, 0]];
                        if need(a) {
                            let d = (bv / (an * bn) - &(av * (c / (an * an)))) * g0;
                            acc(&mut grads[a.0], d);
                        }
                        if need(b) {
                            let d = (av / (an * bn) - &(bv * (c / (bn * bn)))) * g0;
                            acc(&mut grads[b.0], d);
                        }
                    }
                }
                Op::MaskedMse(p, target, mask, o) => {
                    let g0 = g[[0, 0]];
                    let pv = val(p);
                    let mut d = Mat::zeros(pv.raw_dim());
                    for (k, (dv, pk)) in d.iter_mut().zip(pv.iter()).enumerate() {
                        *dv = g0 * -2.0 * mask[k] * (target[k] - pk) / o;
                    }
                    acc(&mut grads[p.0], d);
                }
                Op::Sum(a) => {
                    let g0 = g[[0, 0]];
                    acc(&mut grads[a.0], Mat::from_elem(val(a).raw_dim(), g0));
                }
            }
        }
    }
}

fn acc(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(s) => *s += &g,
        None => *slot = Some(g),
    }
}

fn row_major(m: &Mat, rows: usize, cols: usize) -> Mat {
    assert_eq!(m.len(), rows * cols, "reshape size mismatch");
    Mat::from_shape_vec((rows, cols), m.iter().copied().collect()).expect("shape checked")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of a scalar function built on the graph.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let analytic = {
            let mut g = Graph::new(store);
            let out = f(&mut g);
            g.backward(&[(out, 1.0)])
        };
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).as_slice().unwrap()[k];
                store.get_mut(id).as_slice_mut().unwrap()[k] = orig + h;
                let up = { let mut g = Graph::new(store); let v = f(&mut g); g.scalar(v) };
                store.get_mut(id).as_slice_mut().unwrap()[k] = orig - h;
                let dn = { let mut g = Graph::new(store); let v = f(&mut g); g.scalar(v) };
                store.get_mut(id).as_slice_mut().unwrap()[k] = orig;
                let num = (up - dn) / (2.0 * h);
                let a = analytic[id.0].as_slice().unwrap()[k];
                assert!(
                    (a - num).abs() <= 1e-6 * (1.0 + num.abs()),
                    "{}[{k}]: analytic {a} numeric {num}",
                    store.name(id)
                );
            }
        }
    }

    fn store(shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        for (n, r, c) in shapes {
            let m = Mat::from_shape_fn((*r, *c), |_| rng.random_range(-1.0..1.0));
            s.add(*n, m);
        }
        s
    }

    #[test]
    fn grad_dense_ops() {
        let mut s = store(&[("a", 3, 4), ("b", 4, 2), ("r", 1, 2), ("c", 3, 2)]);
        check(&mut s, |g| {
            let (a, b, r, c) = (g.param(ParamId(0)), g.param(ParamId(1)), g.param(ParamId(2)), g.param(ParamId(3)));
            let x = g.matmul(a, b);
            let x = g.add_row(x, r);
            let x = g.mul_row(x, r);
            let x = g.gelu(x);
            let y = g.sigmoid(c);
            let x = g.mul(x, y);
            let x = g.sub(x, c);
            let x = g.layer_norm(x);
            let x = g.affine(x, 0.7, 0.2);
            let t = g.transpose(x);
            let t = g.reshape(t, 3, 2);
            let x = g.add(x, t);
            let x = g.mul_const(x, Mat::from_elem((3, 2), 1.5));
            let x = g.mul(x, x);
            g.sum(x)
        });
    }

    #[test]
    fn grad_structural_ops() {
        let mut s = store(&[("a", 3, 4), ("b", 2, 4), ("q", 1, 4)]);
        check(&mut s, |g| {
            let (a, b, q) = (g.param(ParamId(0)), g.param(ParamId(1)), g.param(ParamId(2)));
            let ab = g.concat_rows(&[a, b]);
            let sm = g.softmax_rows(ab, Some(&[true, false, true, true]));
            let sel = g.select_rows(sm, &[4, 0, 4]);
            let c = g.select_cols(sel, &[1, 3]);
            let c = g.slice_cols(c, 1, 1);
            let c = g.slice_rows(c, 2, 1);
            let w = g.slice_rows(ab, 1, 3);
            let cos = g.cosine_rows(q, w);
            let b0 = g.slice_rows(b, 0, 1);
            let cos2 = g.cosine(q, b0);
            let wide = g.concat_cols(&[cos, cos2]);
            let cc = g.matmul(c, wide);
            let s1 = g.masked_mse(cc, &[0.3, 0.1, -0.2, 0.5], &[1.0, 0.0, 1.0, 1.0]);
            let s2 = g.sum(cc);
            let s = g.add(s1, s2);
            g.mul(s, s)
        });
    }

    #[test]
    fn masked_columns_get_zero_weight() {
        let s = store(&[("a", 2, 3)]);
        let mut g = Graph::new(&s);
        let a = g.param(ParamId(0));
        let p = g.softmax_rows(a, Some(&[true, false, true]));
        let v = g.value(p);
        for row in v.rows() {
            assert_eq!(row[1], 0.0);
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_seeds() {
        let s = store(&[("a", 1, 3)]);
        let mut g = Graph::new(&s);
        let a = g.param(ParamId(0));
        let x = g.sum(a);
        let y = g.mul(a, a);
        let y = g.sum(y);
        let grads = g.backward(&[(x, 2.0), (y, 0.5)]);
        for (gk, ak) in grads[0].iter().zip(s.get(ParamId(0)).iter()) {
            assert!((gk - (2.0 + ak)).abs() < 1e-12);
        }
    }

    #[test]
    fn checksum_tracks_structure() {
        let a = store(&[("a", 1, 3)]);
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.zeros("z", 1, 1);
        assert_ne!(a.checksum(), b.checksum());
    }
}
