//! Reverse-mode tape.
//!
//! Every operation appends a node holding its value and how to route a
//! gradient back to its inputs. `backward` walks the tape once in reverse.
//! Nodes that do not depend on a gradient-tracking leaf are skipped.

use std::rc::Rc;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use super::tensor::Tensor;

static WATCH: AtomicBool = AtomicBool::new(false);
static NON_FINITE: AtomicUsize = AtomicUsize::new(0);

/// Turn the process-wide finiteness watch on or off. While on, every value
/// recorded on any tape and every gradient reaching a tracked node is
/// scanned, and tensors holding NaN or infinity are counted.
pub fn watch_finite(on: bool) {
    WATCH.store(on, Ordering::SeqCst);
}

/// Non-finite tensors seen since the last call; resets the count.
pub fn take_non_finite() -> usize {
    NON_FINITE.swap(0, Ordering::SeqCst)
}

fn inspect(t: &Tensor) {
    if WATCH.load(Ordering::Relaxed) && t.data().iter().any(|v| !v.is_finite()) {
        NON_FINITE.fetch_add(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Transpose(Var),
    NeighborSum {
        h: Var,
        w: Var,
        edges: Rc<[(usize, usize)]>,
    },
    MeanRows(Var),
    SumRows(Var),
    SegmentMean(Var, Rc<[usize]>),
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MaskMul(Var, Rc<[f64]>),
    SoftmaxCols(Var),
    Pick(Var, usize),
    WeightedCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        inspect(&value);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Input that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is recorded.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Every node value on the tape, in creation order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise op on different shapes");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.rows(), x.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), t)
    }

    fn broadcast_row(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows() == 1 && r.cols() == x.cols(), "row broadcast shape mismatch");
        let mut out = x.clone();
        let c = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, r.data()[i % c]);
        }
        out
    }

    /// `a + row` with `row` (1 x c) added to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.broadcast_row(a, row, |p, q| p + q);
        let t = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), t)
    }

    /// `a * row` with `row` (1 x c) multiplied into every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.broadcast_row(a, row, |p, q| p * q);
        let t = self.tracked(a) || self.tracked(row);
        self.push(value, Op::MulRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, s), t)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let t = self.tracked(a);
        self.push(value, Op::AddScalar(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let t = self.tracked(a);
        self.push(value, Op::Relu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let t = self.tracked(a);
        self.push(value, Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let t = self.tracked(a);
        self.push(value, Op::Tanh(a), t)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let t = self.tracked(a);
        self.push(value, Op::Ln(a), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    /// `out[v] = sum over edges {u, v} of w_e * h[u]`, treating each stored
    /// edge as undirected. `w` is `1 x E`.
    pub fn neighbor_sum(&mut self, h: Var, w: Var, edges: Rc<[(usize, usize)]>) -> Var {
        let hv = self.value(h);
        let wv = self.value(w);
        assert_eq!(wv.len(), edges.len(), "one weight per edge");
        let d = hv.cols();
        let mut out = Tensor::zeros(hv.rows(), d);
        {
            let o = out.data_mut();
            for (e, &(i, j)) in edges.iter().enumerate() {
                let we = wv.data()[e];
                if we == 0.0 {
                    continue;
                }
                let (hi, hj) = (hv.row(i), hv.row(j));
                for c in 0..d {
                    o[i * d + c] += we * hj[c];
                    o[j * d + c] += we * hi[c];
                }
            }
        }
        let t = self.tracked(h) || self.tracked(w);
        self.push(out, Op::NeighborSum { h, w, edges }, t)
    }

    fn reduce_rows(&self, a: Var, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let x = self.value(a);
        let col: Vec<f64> = (0..x.cols())
            .map(|c| f(&(0..x.rows()).map(|r| x.get(r, c)).collect::<Vec<_>>()))
            .collect();
        Tensor::row_vector(col)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.reduce_rows(a, |c| ordered_sum(c) / c.len() as f64);
        let t = self.tracked(a);
        self.push(value, Op::MeanRows(a), t)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.reduce_rows(a, ordered_sum);
        let t = self.tracked(a);
        self.push(value, Op::SumRows(a), t)
    }

    /// Mean of each row block `offsets[s]..offsets[s + 1]`, one output row
    /// per block. Empty blocks give a zero row.
    pub fn segment_mean(&mut self, a: Var, offsets: Rc<[usize]>) -> Var {
        let x = self.value(a);
        assert!(!offsets.is_empty() && offsets[offsets.len() - 1] == x.rows(), "segments must cover every row");
        let (segs, c) = (offsets.len() - 1, x.cols());
        let mut out = Tensor::zeros(segs, c);
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi == lo {
                continue;
            }
            for col in 0..c {
                let vals: Vec<f64> = (lo..hi).map(|r| x.get(r, col)).collect();
                out.data_mut()[s * c + col] = ordered_sum(&vals) / (hi - lo) as f64;
            }
        }
        let t = self.tracked(a);
        self.push(out, Op::SegmentMean(a, offsets), t)
    }

    /// Column-wise maximum; the gradient flows to the first maximal row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows() > 0, "max over zero rows");
        let mut arg = vec![0usize; x.cols()];
        let mut best: Vec<f64> = x.row(0).to_vec();
        for r in 1..x.rows() {
            for (c, v) in x.row(r).iter().enumerate() {
                if *v > best[c] {
                    best[c] = *v;
                    arg[c] = r;
                }
            }
        }
        let t = self.tracked(a);
        self.push(Tensor::row_vector(best), Op::MaxRows(a, arg), t)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let t = self.tracked(a);
        self.push(value, Op::SumAll(a), t)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        let t = self.tracked(a);
        self.push(value, Op::MeanAll(a), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let x = self.value(p);
                assert_eq!(x.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(x.row(r));
            }
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::new(rows, cols, data).expect("shape"), Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::new(rows, cols, data).expect("shape"), Op::ConcatRows(parts.to_vec()), t)
    }

    /// Elementwise product with a fixed mask.
    pub fn mask_mul(&mut self, a: Var, mask: Rc<[f64]>) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), mask.len(), "mask length");
        let data = x.data().iter().zip(mask.iter()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.rows(), x.cols(), data).expect("shape");
        let t = self.tracked(a);
        self.push(value, Op::MaskMul(a, mask), t)
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(rows, cols);
        for c in 0..cols {
            let m = (0..rows).map(|r| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in 0..rows {
                let e = (x.get(r, c) - m).exp();
                out.data_mut()[r * cols + c] = e;
                z += e;
            }
            for r in 0..rows {
                out.data_mut()[r * cols + c] /= z;
            }
        }
        let t = self.tracked(a);
        self.push(out, Op::SoftmaxCols(a), t)
    }

    /// Single entry (flat row-major index) as a `1 x 1` value.
    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let value = Tensor::scalar(self.value(a).data()[index]);
        let t = self.tracked(a);
        self.push(value, Op::Pick(a, index), t)
    }

    /// `sum_i w[y_i] * -log softmax(z_i)[y_i] / sum_i w[y_i]` over the rows
    /// of `logits`. Zero when every sample weight is zero.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Var {
        let z = self.value(logits);
        let (b, c) = (z.rows(), z.cols());
        assert_eq!(labels.len(), b, "one label per row");
        assert_eq!(class_weights.len(), c, "one weight per class");
        let mut probs = Tensor::zeros(b, c);
        let mut loss = 0.0;
        let mut denom = 0.0;
        let weights: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
        for i in 0..b {
            let row = z.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for k in 0..c {
                probs.data_mut()[i * c + k] = (row[k] - lse).exp();
            }
            loss += weights[i] * (lse - row[labels[i]]);
            denom += weights[i];
        }
        let value = Tensor::scalar(if denom > 0.0 { loss / denom } else { 0.0 });
        let t = self.tracked(logits);
        self.push(
            value,
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
                denom,
            },
            t,
        )
    }

    /// Gradients of the scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            inspect(&g);
            self.route(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn route(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let bt = self.value(*b).transpose();
                    self.acc(grads, *a, g.matmul(&bt));
                }
                if self.tracked(*b) {
                    let at = self.value(*a).transpose();
                    self.acc(grads, *b, at.matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
                    self.acc(grads, *a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
                }
                if self.tracked(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect();
                    self.acc(grads, *b, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.tracked(*row) {
                    let mut s = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    self.acc(grads, *row, s);
                }
            }
            Op::MulRow(a, row) => {
                let (x, rv) = (self.value(*a), self.value(*row));
                let c = g.cols();
                if self.tracked(*a) {
                    let d = g.data().iter().enumerate().map(|(i, v)| v * rv.data()[i % c]).collect();
                    self.acc(grads, *a, Tensor::new(g.rows(), c, d).expect("shape"));
                }
                if self.tracked(*row) {
                    let mut s = Tensor::zeros(1, c);
                    for (i, (gv, xv)) in g.data().iter().zip(x.data()).enumerate() {
                        s.data_mut()[i % c] += gv * xv;
                    }
                    self.acc(grads, *row, s);
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 }).collect();
                self.acc(grads, *a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.acc(grads, *a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.acc(grads, *a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let d = g.data().iter().zip(x.data()).map(|(gv, xv)| gv / xv).collect();
                self.acc(grads, *a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::NeighborSum { h, w, edges } => {
                let hv = self.value(*h);
                let wv = self.value(*w);
                let d = hv.cols();
                if self.tracked(*h) {
                    let mut dh = Tensor::zeros(hv.rows(), d);
                    let o = dh.data_mut();
                    for (e, &(i, j)) in edges.iter().enumerate() {
                        let we = wv.data()[e];
                        if we == 0.0 {
                            continue;
                        }
                        let (gi, gj) = (g.row(i), g.row(j));
                        for c in 0..d {
                            o[j * d + c] += we * gi[c];
                            o[i * d + c] += we * gj[c];
                        }
                    }
                    self.acc(grads, *h, dh);
                }
                if self.tracked(*w) {
                    let dw: Vec<f64> = edges
                        .iter()
                        .map(|&(i, j)| {
                            let a: f64 = g.row(i).iter().zip(hv.row(j)).map(|(p, q)| p * q).sum();
                            let b: f64 = g.row(j).iter().zip(hv.row(i)).map(|(p, q)| p * q).sum();
                            a + b
                        })
                        .collect();
                    self.acc(grads, *w, Tensor::new(wv.rows(), wv.cols(), dw).expect("shape"));
                }
            }
            Op::MeanRows(a) | Op::SumRows(a) => {
                let x = self.value(*a);
                let scale = if matches!(op, Op::MeanRows(_)) { 1.0 / x.rows() as f64 } else { 1.0 };
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let c = x.cols();
                for (i, v) in d.data_mut().iter_mut().enumerate() {
                    *v = g.data()[i % c] * scale;
                }
                self.acc(grads, *a, d);
            }
            Op::SegmentMean(a, offsets) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut d = Tensor::zeros(x.rows(), c);
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let inv = 1.0 / (hi - lo).max(1) as f64;
                    for r in lo..hi {
                        for col in 0..c {
                            d.data_mut()[r * c + col] = g.get(s, col) * inv;
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::MaxRows(a, arg) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let c = x.cols();
                for (col, &r) in arg.iter().enumerate() {
                    d.data_mut()[r * c + col] = g.data()[col];
                }
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, Tensor::filled(x.rows(), x.cols(), g.item()));
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, Tensor::filled(x.rows(), x.cols(), g.item() / x.len() as f64));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.tracked(p) {
                        let mut d = Vec::with_capacity(g.rows() * pc);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        self.acc(grads, p, Tensor::new(g.rows(), pc, d).expect("shape"));
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let c = g.cols();
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.tracked(p) {
                        let d = g.data()[offset * c..(offset + pr) * c].to_vec();
                        self.acc(grads, p, Tensor::new(pr, c, d).expect("shape"));
                    }
                    offset += pr;
                }
            }
            Op::MaskMul(a, mask) => {
                let d = g.data().iter().zip(mask.iter()).map(|(p, q)| p * q).collect();
                self.acc(grads, *a, Tensor::new(g.rows(), g.cols(), d).expect("shape"));
            }
            Op::SoftmaxCols(a) => {
                let (rows, cols) = (out.rows(), out.cols());
                let mut d = Tensor::zeros(rows, cols);
                for c in 0..cols {
                    let dot: f64 = (0..rows).map(|r| g.get(r, c) * out.get(r, c)).sum();
                    for r in 0..rows {
                        d.data_mut()[r * cols + c] = out.get(r, c) * (g.get(r, c) - dot);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Pick(a, index) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                d.data_mut()[*index] = g.item();
                self.acc(grads, *a, d);
            }
            Op::WeightedCrossEntropy {
                logits,
                labels,
                weights,
                probs,
                denom,
            } => {
                let (b, c) = (probs.rows(), probs.cols());
                let mut d = Tensor::zeros(b, c);
                if *denom > 0.0 {
                    let s = g.item() / denom;
                    for i in 0..b {
                        for k in 0..c {
                            let onehot = if k == labels[i] { 1.0 } else { 0.0 };
                            d.data_mut()[i * c + k] = s * weights[i] * (probs.get(i, k) - onehot);
                        }
                    }
                }
                self.acc(grads, *logits, d);
            }
        }
    }
}

/// Sum in ascending value order, so row order cannot change the result.
fn ordered_sum(c: &[f64]) -> f64 {
    let mut v = c.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod watch_tests {
    use super::*;

    #[test]
    fn watch_counts_non_finite_values() {
        watch_finite(true);
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let _ = t.ln(x);
        watch_finite(false);
        // other tests may add to the shared count, never subtract
        assert!(take_non_finite() >= 1);
    }
}
