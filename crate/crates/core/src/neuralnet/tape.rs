//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or named parameters; [`Tape::backward`] returns gradients keyed by
//! parameter name. Only the operations the embedding network and the
//! classifier need are provided.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array2, Axis};

use super::Parameters;

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    GatherRows(Var, Rc<Vec<usize>>),
    ConcatRows(Var, Var),
    BlockDot {
        x: Var,
        a: Var,
        heads: usize,
    },
    SegmentSoftmax {
        x: Var,
        seg: Rc<Vec<usize>>,
    },
    SegmentWeightedSum {
        v: Var,
        w: Var,
        seg: Rc<Vec<usize>>,
    },
    L2NormalizeRows(Var),
    RowNorms(Var),
    Huber(Var, f64),
    LogisticLoss(Var, Rc<Vec<f64>>),
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients keyed by parameter name.
pub type Gradients = HashMap<String, Matrix>;

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a named parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &Parameters, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    /// Adds a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| leaky(x, slope));
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let value = self.value(a).select(Axis(0), &index);
        self.push(value, Op::GatherRows(a, index))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("column counts agree");
        self.push(value, Op::ConcatRows(a, b))
    }

    /// Per-head dot products: `out[e, h] = Σ_{c in block h} x[e, c] · a[0, c]`
    /// where the columns split into `heads` equal blocks.
    pub fn block_dot(&mut self, x: Var, a: Var, heads: usize) -> Var {
        let (xv, av) = (self.value(x), self.value(a));
        let (rows, cols) = xv.dim();
        assert_eq!(cols % heads, 0, "columns divisible by heads");
        let width = cols / heads;
        let mut out = Matrix::zeros((rows, heads));
        for e in 0..rows {
            for h in 0..heads {
                let mut s = 0.0;
                for c in h * width..(h + 1) * width {
                    s += xv[[e, c]] * av[[0, c]];
                }
                out[[e, h]] = s;
            }
        }
        self.push(out, Op::BlockDot { x, a, heads })
    }

    /// Column-wise softmax within each segment of rows.
    pub fn segment_softmax(&mut self, x: Var, seg: Rc<Vec<usize>>, segments: usize) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut max = Matrix::from_elem((segments, cols), f64::NEG_INFINITY);
        for e in 0..rows {
            for c in 0..cols {
                let m = &mut max[[seg[e], c]];
                *m = m.max(xv[[e, c]]);
            }
        }
        let mut out = Matrix::zeros((rows, cols));
        let mut sum = Matrix::zeros((segments, cols));
        for e in 0..rows {
            for c in 0..cols {
                let v = (xv[[e, c]] - max[[seg[e], c]]).exp();
                out[[e, c]] = v;
                sum[[seg[e], c]] += v;
            }
        }
        for e in 0..rows {
            for c in 0..cols {
                out[[e, c]] /= sum[[seg[e], c]];
            }
        }
        self.push(out, Op::SegmentSoftmax { x, seg })
    }

    /// `out[s, block h] = Σ_{e in segment s} w[e, h] · v[e, block h]`.
    pub fn segment_weighted_sum(
        &mut self,
        v: Var,
        w: Var,
        seg: Rc<Vec<usize>>,
        segments: usize,
    ) -> Var {
        let (vv, wv) = (self.value(v), self.value(w));
        let (rows, cols) = vv.dim();
        let heads = wv.ncols();
        let width = cols / heads;
        let mut out = Matrix::zeros((segments, cols));
        for e in 0..rows {
            let s = seg[e];
            for h in 0..heads {
                let weight = wv[[e, h]];
                for c in h * width..(h + 1) * width {
                    out[[s, c]] += weight * vv[[e, c]];
                }
            }
        }
        self.push(out, Op::SegmentWeightedSum { v, w, seg })
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt().max(1e-12);
            row /= norm;
        }
        self.push(value, Op::L2NormalizeRows(a))
    }

    /// Euclidean norm of each row, as an n×1 column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.push(value, Op::RowNorms(a))
    }

    /// Elementwise Huber loss.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let value = self.value(a).mapv(|x| super::huber(x, delta));
        self.push(value, Op::Huber(a, delta))
    }

    /// Elementwise binary cross-entropy of logits against 0/1 targets.
    pub fn logistic_loss(&mut self, logits: Var, targets: Rc<Vec<f64>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len());
        let mut value = lv.clone();
        for (z, &t) in value.iter_mut().zip(targets.iter()) {
            // max(z, 0) - z t + ln(1 + e^{-|z|})
            *z = z.max(0.0) - *z * t + (-z.abs()).exp().ln_1p();
        }
        self.push(value, Op::LogisticLoss(logits, targets))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = self.value(a);
        let m = value.sum() / value.len() as f64;
        self.push(Matrix::from_elem((1, 1), m), Op::Mean(a))
    }

    /// Gradients of the 1×1 node `loss` with respect to every bound parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones(self.value(loss).dim()));
        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g * *f),
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d *= slope;
                            }
                        });
                    acc(&mut grads, *a, d);
                }
                Op::GatherRows(a, index) => {
                    let mut d = Matrix::zeros(self.value(*a).dim());
                    for (r, &src) in index.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatRows(a, b) => {
                    let n = self.value(*a).nrows();
                    acc(&mut grads, *a, g.slice(ndarray::s![..n, ..]).to_owned());
                    acc(&mut grads, *b, g.slice(ndarray::s![n.., ..]).to_owned());
                }
                Op::BlockDot { x, a, heads } => {
                    let (xv, av) = (self.value(*x), self.value(*a));
                    let (rows, cols) = xv.dim();
                    let width = cols / heads;
                    let mut dx = Matrix::zeros((rows, cols));
                    let mut da = Matrix::zeros((1, cols));
                    for e in 0..rows {
                        for h in 0..*heads {
                            let ge = g[[e, h]];
                            for c in h * width..(h + 1) * width {
                                dx[[e, c]] = ge * av[[0, c]];
                                da[[0, c]] += ge * xv[[e, c]];
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *a, da);
                }
                Op::SegmentSoftmax { x, seg } => {
                    let s = &node.value;
                    let (rows, cols) = s.dim();
                    let segments = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = Matrix::zeros((segments, cols));
                    for e in 0..rows {
                        for c in 0..cols {
                            dot[[seg[e], c]] += s[[e, c]] * g[[e, c]];
                        }
                    }
                    let mut d = Matrix::zeros((rows, cols));
                    for e in 0..rows {
                        for c in 0..cols {
                            d[[e, c]] = s[[e, c]] * (g[[e, c]] - dot[[seg[e], c]]);
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::SegmentWeightedSum { v, w, seg } => {
                    let (vv, wv) = (self.value(*v), self.value(*w));
                    let (rows, cols) = vv.dim();
                    let heads = wv.ncols();
                    let width = cols / heads;
                    let mut dv = Matrix::zeros((rows, cols));
                    let mut dw = Matrix::zeros((rows, heads));
                    for e in 0..rows {
                        let s = seg[e];
                        for h in 0..heads {
                            let weight = wv[[e, h]];
                            let mut sum = 0.0;
                            for c in h * width..(h + 1) * width {
                                dv[[e, c]] = weight * g[[s, c]];
                                sum += vv[[e, c]] * g[[s, c]];
                            }
                            dw[[e, h]] = sum;
                        }
                    }
                    acc(&mut grads, *v, dv);
                    acc(&mut grads, *w, dw);
                }
                Op::L2NormalizeRows(a) => {
                    let xv = self.value(*a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let norm = xv.row(r).dot(&xv.row(r)).sqrt().max(1e-12);
                        let proj = y.row(r).dot(&g.row(r));
                        for c in 0..xv.ncols() {
                            d[[r, c]] = (g[[r, c]] - y[[r, c]] * proj) / norm;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::RowNorms(a) => {
                    let xv = self.value(*a);
                    let mut d = Matrix::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let norm = node.value[[r, 0]];
                        if norm > 0.0 {
                            let scale = g[[r, 0]] / norm;
                            for c in 0..xv.ncols() {
                                d[[r, c]] = scale * xv[[r, c]];
                            }
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Huber(a, delta) => {
                    let mut d = g;
                    ndarray::Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= x.clamp(-*delta, *delta));
                    acc(&mut grads, *a, d);
                }
                Op::LogisticLoss(logits, targets) => {
                    let mut d = g;
                    for ((d, &z), &t) in d
                        .iter_mut()
                        .zip(self.value(*logits).iter())
                        .zip(targets.iter())
                    {
                        let p = 1.0 / (1.0 + (-z).exp());
                        *d *= p - t;
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::Mean(a) => {
                    let shape = self.value(*a).dim();
                    let n = (shape.0 * shape.1) as f64;
                    acc(&mut grads, *a, Matrix::from_elem(shape, g[[0, 0]] / n));
                }
            }
        }
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(self.value(*v).dim()));
                (name.clone(), g)
            })
            .collect()
    }
}
