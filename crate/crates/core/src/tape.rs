//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`] that the tape borrows immutably; [`Tape::backward`]
//! returns gradients for every node, from which parameter gradients are read.

use std::collections::HashMap;

use crate::geometry::{sine_frequencies, LOGIT_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Mat::from_vec(rows.len(), cols, data)
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a * b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul {:?} x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a * b^T`
pub fn matmul_bt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_bt {:?} x {:?}^T", a.shape(), b.shape());
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b`
pub fn matmul_at(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_at {:?}^T x {:?}", a.shape(), b.shape());
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let br = b.row(k);
        for (i, &av) in a.row(k).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter matrices in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
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

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a `k x k` convolution window over an `h x w x c` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Source index into the `(h*w) x c` input for each output cell, or `None` for padding.
    fn for_each(&self, mut f: impl FnMut(usize, Option<usize>)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let cols = self.kernel * self.kernel * self.channels;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = oy * ow + ox;
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < self.height
                            && (ix as usize) < self.width;
                        for c in 0..self.channels {
                            let dst = row * cols + (ky * self.kernel + kx) * self.channels + c;
                            let src = inside
                                .then(|| (iy as usize * self.width + ix as usize) * self.channels + c);
                            f(dst, src);
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Logit(Var),
    Abs(Var),
    Max(Var, Var),
    Min(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Im2Col { x: Var, geom: ConvGeom },
    BoxSine { x: Var, freqs: Vec<f64> },
    Focal { probs: Var, targets: Vec<usize>, alphas: Vec<f64>, gamma: f64 },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const FOCAL_FLOOR: f64 = 1e-12;

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients of one scalar output with respect to every node of a tape.
pub struct Grads {
    nodes: Vec<Option<Mat>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id).and_then(|v| self.of(*v))
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_bt(self.value(a), self.value(b));
        self.push(value, Op::MatMulBT(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let value = Mat::from_vec(x.rows, x.cols, data);
        self.push(value, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let value = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|p| f(*p)).collect());
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Div(a, b), |p, q| p / q)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Max(a, b), f64::max)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Min(a, b), f64::min)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "add_row shape mismatch");
        let mut value = x.clone();
        for i in 0..value.rows {
            for (o, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "mul_row shape mismatch");
        let mut value = x.clone();
        for i in 0..value.rows {
            for (o, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *o *= b;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |p| p * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let k = self.constant(Mat::from_vec(r, c, vec![s; r * c]));
        self.add(a, k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |p| p.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), crate::geometry::logistic)
    }

    /// Inverse logistic with inputs clamped to `[LOGIT_EPS, 1 - LOGIT_EPS]`.
    pub fn logit(&mut self, a: Var) -> Var {
        self.map(a, Op::Logit(a), crate::geometry::inverse_logistic)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows {
            let row = value.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let n = value.cols as f64;
        let mut inv_std = Vec::with_capacity(value.rows);
        for i in 0..value.rows {
            let row = value.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        self.push(value, Op::LayerNorm { x: a, inv_std })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut value = Mat::zeros(x.rows, len);
        for i in 0..x.rows {
            value.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + x.cols].copy_from_slice(x.row(i));
            }
            off += x.cols;
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let x = self.value(*p);
            assert_eq!(x.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&x.data);
            rows += x.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let mut value = Mat::zeros(rows.len(), x.cols);
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(x.row(r));
        }
        self.push(
            value,
            Op::GatherRows {
                x: a,
                rows: rows.to_vec(),
            },
        )
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    /// Unfolds convolution windows of an `(h*w) x c` input into rows.
    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let x = self.value(a);
        assert_eq!(
            (geom.height * geom.width, geom.channels),
            x.shape(),
            "im2col input shape"
        );
        let mut value = Mat::zeros(
            geom.out_height() * geom.out_width(),
            geom.kernel * geom.kernel * geom.channels,
        );
        geom.for_each(|dst, src| {
            if let Some(s) = src {
                value.data[dst] = x.data[s];
            }
        });
        self.push(value, Op::Im2Col { x: a, geom })
    }

    /// Sinusoidal encoding of an `n x 4` box matrix into `n x dim`.
    pub fn box_sine(&mut self, a: Var, dim: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols, 4, "box_sine expects n x 4");
        assert!(dim.is_multiple_of(8), "box_sine dim must be a multiple of 8");
        let feats = dim / 4;
        let freqs = sine_frequencies(feats);
        let mut value = Mat::zeros(x.rows, dim);
        for i in 0..x.rows {
            for c in 0..4 {
                let v = x.get(i, c);
                for (k, w) in freqs.iter().enumerate() {
                    let (s, co) = (v * w).sin_cos();
                    value.data[i * dim + c * feats + 2 * k] = s;
                    value.data[i * dim + c * feats + 2 * k + 1] = co;
                }
            }
        }
        self.push(value, Op::BoxSine { x: a, freqs })
    }

    /// Per-row focal term `-alpha (1 - p_t)^gamma ln p_t` where `p_t` is the
    /// probability of the row's target class; returns `n x 1`.
    pub fn focal(&mut self, probs: Var, targets: &[usize], alphas: &[f64], gamma: f64) -> Var {
        let p = self.value(probs);
        assert_eq!(p.rows, targets.len());
        assert_eq!(p.rows, alphas.len());
        let data = targets
            .iter()
            .zip(alphas)
            .enumerate()
            .map(|(i, (&t, &a))| {
                let pt = p.get(i, t);
                -a * (1.0 - pt).max(0.0).powf(gamma) * pt.max(FOCAL_FLOOR).ln()
            })
            .collect();
        let value = Mat::from_vec(p.rows, 1, data);
        self.push(
            value,
            Op::Focal {
                probs,
                targets: targets.to_vec(),
                alphas: alphas.to_vec(),
                gamma,
            },
        )
    }

    /// Gradients of the `1 x 1` node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::scalar(1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads {
            nodes: grads,
            params: self.bound.clone(),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot => *slot = Some(d),
        };
        let elementwise = |x: &Mat, f: &dyn Fn(usize) -> f64| {
            Mat::from_vec(x.rows, x.cols, (0..x.data.len()).map(f).collect())
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_bt(g, val(*b)));
                acc(*b, matmul_at(val(*a), g));
            }
            Op::MatMulBT(a, b) => {
                acc(*a, matmul(g, val(*b)));
                acc(*b, matmul_at(g, val(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, elementwise(g, &|k| -g.data[k]));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, elementwise(g, &|k| g.data[k] * y.data[k]));
                acc(*b, elementwise(g, &|k| g.data[k] * x.data[k]));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, elementwise(g, &|k| g.data[k] / y.data[k]));
                acc(
                    *b,
                    elementwise(g, &|k| -g.data[k] * x.data[k] / (y.data[k] * y.data[k])),
                );
            }
            Op::Max(a, b) | Op::Min(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let is_max = matches!(node.op, Op::Max(..));
                let pick_a = |k: usize| {
                    if is_max {
                        x.data[k] >= y.data[k]
                    } else {
                        x.data[k] <= y.data[k]
                    }
                };
                acc(*a, elementwise(g, &|k| if pick_a(k) { g.data[k] } else { 0.0 }));
                acc(*b, elementwise(g, &|k| if pick_a(k) { 0.0 } else { g.data[k] }));
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                let mut dr = Mat::zeros(1, g.cols);
                for k in 0..g.rows {
                    for (o, v) in dr.data.iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*r, dr);
            }
            Op::MulRow(a, r) => {
                let (x, rv) = (val(*a), val(*r));
                acc(*a, elementwise(g, &|k| g.data[k] * rv.data[k % g.cols]));
                let mut dr = Mat::zeros(1, g.cols);
                for (k, gv) in g.data.iter().enumerate() {
                    dr.data[k % g.cols] += gv * x.data[k];
                }
                acc(*r, dr);
            }
            Op::Scale(a, s) => acc(*a, elementwise(g, &|k| g.data[k] * s)),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, elementwise(g, &|k| if x.data[k] > 0.0 { g.data[k] } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, elementwise(g, &|k| g.data[k] * y.data[k] * (1.0 - y.data[k])));
            }
            Op::Logit(a) => {
                let x = val(*a);
                acc(
                    *a,
                    elementwise(g, &|k| {
                        let p = x.data[k];
                        if p > LOGIT_EPS && p < 1.0 - LOGIT_EPS {
                            g.data[k] / (p * (1.0 - p))
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(
                    *a,
                    elementwise(g, &|k| {
                        let v = x.data[k];
                        if v > 0.0 {
                            g.data[k]
                        } else if v < 0.0 {
                            -g.data[k]
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in d.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gy: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] / n * (n * gr[c] - sum_g - yr[c] * sum_gy);
                    }
                }
                acc(*x, d);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut d = Mat::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = val(*p).cols;
                    let mut d = Mat::zeros(g.rows, c);
                    for r in 0..g.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                    }
                    acc(*p, d);
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = val(*p).shape();
                    acc(*p, Mat::from_vec(r, c, g.data[off * c..(off + r) * c].to_vec()));
                    off += r;
                }
            }
            Op::GatherRows { x, rows } => {
                let xv = val(*x);
                let mut d = Mat::zeros(xv.rows, xv.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*x, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Mat::from_vec(r, c, vec![g.data[0]; r * c]));
            }
            Op::Im2Col { x, geom } => {
                let xv = val(*x);
                let mut d = Mat::zeros(xv.rows, xv.cols);
                geom.for_each(|dst, src| {
                    if let Some(s) = src {
                        d.data[s] += g.data[dst];
                    }
                });
                acc(*x, d);
            }
            Op::BoxSine { x, freqs } => {
                let xv = val(*x);
                let y = &node.value;
                let dim = y.cols;
                let feats = dim / 4;
                let mut d = Mat::zeros(xv.rows, 4);
                for r in 0..xv.rows {
                    for c in 0..4 {
                        let mut s = 0.0;
                        for (k, w) in freqs.iter().enumerate() {
                            let base = r * dim + c * feats + 2 * k;
                            // d sin = cos * w, d cos = -sin * w
                            s += w * (y.data[base + 1] * g.data[base] - y.data[base] * g.data[base + 1]);
                        }
                        d.data[r * 4 + c] = s;
                    }
                }
                acc(*x, d);
            }
            Op::Focal {
                probs,
                targets,
                alphas,
                gamma,
            } => {
                let p = val(*probs);
                let mut d = Mat::zeros(p.rows, p.cols);
                for (r, (&t, &a)) in targets.iter().zip(alphas).enumerate() {
                    let pt = p.get(r, t);
                    let q = (1.0 - pt).max(0.0);
                    let lnp = pt.max(FOCAL_FLOOR).ln();
                    let dlog = if pt > FOCAL_FLOOR { 1.0 / pt } else { 0.0 };
                    let dq = if *gamma == 0.0 {
                        0.0
                    } else {
                        gamma * q.powf(gamma - 1.0)
                    };
                    // loss = -a q^gamma ln p,  dq/dp = -1
                    let dp = -a * (-dq * lnp + q.powf(*gamma) * dlog);
                    d.data[r * p.cols + t] = g.data[r] * dp;
                }
                acc(*probs, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
        )
    }

    /// Central-difference check of `f` with respect to each registered parameter.
    fn check(store: &ParamStore, f: &dyn Fn(&mut Tape) -> Var) {
        let mut tape = Tape::new(store);
        let out = f(&mut tape);
        let grads = tape.backward(out);
        let h = 1e-6;
        for id in store.ids() {
            let analytic = grads.param(id).cloned().unwrap_or_else(|| {
                let m = store.get(id);
                Mat::zeros(m.rows, m.cols)
            });
            for k in 0..store.get(id).data.len() {
                let mut plus = store.clone();
                plus.get_mut(id).data[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data[k] -= h;
                let fp = {
                    let mut t = Tape::new(&plus);
                    let o = f(&mut t);
                    t.value(o).data[0]
                };
                let fm = {
                    let mut t = Tape::new(&minus);
                    let o = f(&mut t);
                    t.value(o).data[0]
                };
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data[k];
                let scale = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / scale < 1e-5,
                    "{} [{k}]: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn matmul_kernels_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(3, 4, &mut rng, -1.0, 1.0);
        let b = random(4, 5, &mut rng, -1.0, 1.0);
        let c = matmul(&a, &b);
        for i in 0..3 {
            for j in 0..5 {
                let e: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - e).abs() < 1e-14);
            }
        }
        let bt = Mat::from_vec(5, 4, (0..20).map(|k| b.get(k % 4, k / 4)).collect());
        assert_eq!(matmul_bt(&a, &bt), c);
        let at = Mat::from_vec(4, 3, (0..12).map(|k| a.get(k % 3, k / 3)).collect());
        let c2 = matmul_at(&at, &b);
        for (x, y) in c.data.iter().zip(&c2.data) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_of_linear_algebra_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let a = store.add("a", random(3, 4, &mut rng, -1.0, 1.0));
        let b = store.add("b", random(4, 2, &mut rng, -1.0, 1.0));
        let c = store.add("c", random(5, 4, &mut rng, -1.0, 1.0));
        let r = store.add("r", random(1, 2, &mut rng, 0.5, 1.5));
        check(&store, &|t| {
            let (va, vb, vc, vr) = (t.param(a), t.param(b), t.param(c), t.param(r));
            let ab = t.matmul(va, vb);
            let ab = t.add_row(ab, vr);
            let ab = t.mul_row(ab, vr);
            let ac_t = t.matmul_bt(va, vc);
            let sm = t.softmax(ac_t);
            let ln = t.layer_norm(sm);
            let g = t.gather_rows(ln, &[2, 0, 2]);
            let s = t.slice_cols(g, 1, 3);
            let cc = t.concat_cols(&[s, ab]);
            let rr = t.concat_rows(&[cc, cc]);
            let q = t.mul(rr, rr);
            let q = t.scale(q, 0.7);
            t.sum(q)
        });
    }

    #[test]
    fn gradients_of_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.add("x", random(2, 4, &mut rng, 0.1, 0.9));
        let y = store.add("y", random(2, 4, &mut rng, -2.0, 2.0));
        check(&store, &|t| {
            let (vx, vy) = (t.param(x), t.param(y));
            let lg = t.logit(vx);
            let s = t.add(lg, vy);
            let sg = t.sigmoid(s);
            let mx = t.max(sg, vx);
            let mn = t.min(mx, vy);
            let ab = t.abs(mn);
            let rl = t.relu(vy);
            let d = t.add_scalar(rl, 1.0);
            let q = t.div(ab, d);
            let e = t.sub(q, sg);
            let e = t.mul(e, e);
            t.sum(e)
        });
    }

    #[test]
    fn gradients_of_conv_sine_and_focal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let img = store.add("img", random(5 * 4, 2, &mut rng, -1.0, 1.0));
        let w = store.add("w", random(18, 3, &mut rng, -1.0, 1.0));
        let boxes = store.add("boxes", random(3, 4, &mut rng, 0.1, 0.9));
        let logits = store.add("logits", random(3, 3, &mut rng, -1.0, 1.0));
        let geom = ConvGeom {
            height: 5,
            width: 4,
            channels: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        check(&store, &|t| {
            let x = t.param(img);
            let cols = t.im2col(x, geom);
            let wv = t.param(w);
            let y = t.matmul(cols, wv);
            let y2 = t.mul(y, y);
            let a = t.sum(y2);
            let bv = t.param(boxes);
            let e = t.box_sine(bv, 16);
            let e = t.scale(e, 0.3);
            let b = t.sum(e);
            let lv = t.param(logits);
            let p = t.softmax(lv);
            let f = t.focal(p, &[0, 2, 1], &[0.25, 0.75, 0.75], 2.0);
            let c = t.sum(f);
            let ab = t.add(a, b);
            t.add(ab, c)
        });
    }

    #[test]
    fn conv_geometry_shapes() {
        let g = ConvGeom {
            height: 64,
            width: 64,
            channels: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((g.out_height(), g.out_width()), (32, 32));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let mut t = Tape::new(&store);
        let v = t.param(x);
        let d = t.detach(v);
        let p = t.mul(v, d);
        let s = t.sum(p);
        let g = t.backward(s);
        assert_eq!(g.param(x).unwrap().data, vec![1.0, 2.0]);
    }
}
