//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its
//! output value and whatever it needs for the backward sweep. Nodes are only
//! ever appended, so inputs always precede their consumers and a single
//! reverse pass visits each node once.
//!
//! ```
//! use tcan::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(&Tensor::vector(vec![1.0, 2.0]));
//! let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
//! let prod = g.mul(w, x).unwrap();
//! let loss = g.sum(prod);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[3.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sum(Var),
    SoftmaxCols(Var),
    LayerNormCols {
        x: Var,
        gain: Var,
        shift: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ColumnCosine(Var, Var),
    Element(Var, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The gradient tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Result of [`Graph::backward`]: one gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes the loss does not
    /// depend on get an all-zero gradient.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
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

    /// Drop every node recorded after `mark` (a previous [`Graph::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.backward_done = false;
    }

    /// Allow another [`Graph::backward`] call on the same tape.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `w · x` for `w: d_out × d_in` and `x: d_in × n`, no bias.
    pub fn linear_nobias(&mut self, x: Var, w: Var) -> Result<Var> {
        if self.shape(w)[1] != self.shape(x)[0] {
            return Err(Error::Dimension {
                op: "linear_nobias",
                left: self.shape(w),
                right: self.shape(x),
            });
        }
        self.matmul(w, x)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax applied independently to every column.
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let out = softmax_columns(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxCols(a), rg))
    }

    /// Layer normalisation of each column over the feature (row) axis,
    /// followed by `gain ⊙ x̂ + shift`. `gain` and `shift` are `d × 1`.
    pub fn layer_norm_cols(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let [d, n] = self.shape(x);
        if d < 2 {
            return Err(Error::Dimension {
                op: "layer_norm (needs d >= 2)",
                left: [d, n],
                right: [2, n],
            });
        }
        for p in [gain, shift] {
            if self.shape(p) != [d, 1] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    left: [d, n],
                    right: self.shape(p),
                });
            }
        }
        let (normed, inv_std) = normalize_columns(self.value(x), eps);
        let g = self.value(gain);
        let s = self.value(shift);
        let mut out = normed.clone();
        for r in 0..d {
            let (gr, sr) = (g.get(r, 0), s.get(r, 0));
            for c in 0..n {
                out.set(r, c, gr * normed.get(r, c) + sr);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            out,
            Op::LayerNormCols {
                x,
                gain,
                shift,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a);
        if start >= end || end > shape[1] {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: shape,
                right: [start, end],
            });
        }
        let out = self.value(a).slice_cols(start, end);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a);
        if start >= end || end > shape[0] {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: shape,
                right: [start, end],
            });
        }
        let out = self.value(a).slice_rows(start, end);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Cosine similarity of matching columns, as a `1 × n` row.
    ///
    /// A zero-norm column in `a` is an input error. A zero-norm column in `b`
    /// yields 0 with zero gradient.
    pub fn column_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.ensure_same_shape(tb, "column_cosine")?;
        let [d, n] = ta.shape();
        let mut out = Tensor::zeros(1, n);
        for c in 0..n {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for r in 0..d {
                let (x, y) = (ta.get(r, c), tb.get(r, c));
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 {
                return Err(Error::input(format!("zero-norm vector in column {c}")));
            }
            if nb > 0.0 {
                out.set(0, c, dot / (na.sqrt() * nb.sqrt()));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ColumnCosine(a, b), rg))
    }

    /// Entry `(r, c)` as a `1 × 1` tensor.
    pub fn element(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let shape = self.shape(a);
        if r >= shape[0] || c >= shape[1] {
            return Err(Error::Dimension {
                op: "element",
                left: shape,
                right: [r, c],
            });
        }
        let out = Tensor::scalar(self.value(a).get(r, c));
        let rg = self.rg(a);
        Ok(self.push(out, Op::Element(a, r, c), rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar seed, got {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset() first".into(),
            ));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let g = gy.matmul(&self.value(*b).transpose()).expect("matmul grad");
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = self.value(*a).transpose().matmul(gy).expect("matmul grad");
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, gy.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let g = gy.zip_map(self.value(*b), "mul", |g, y| g * y).unwrap();
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = gy.zip_map(self.value(*a), "mul", |g, x| g * x).unwrap();
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gy.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, gy.clone()),
            Op::Relu(a) => {
                // Subgradient 0 at the kink.
                let g = gy
                    .zip_map(self.value(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, gy.item()));
            }
            Op::SoftmaxCols(a) => {
                let y = &node.value;
                let [r, c] = y.shape();
                let mut g = Tensor::zeros(r, c);
                for col in 0..c {
                    let dot: f64 = (0..r).map(|i| y.get(i, col) * gy.get(i, col)).sum();
                    for i in 0..r {
                        g.set(i, col, y.get(i, col) * (gy.get(i, col) - dot));
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNormCols {
                x,
                gain,
                shift,
                normed,
                inv_std,
            } => {
                let [d, n] = normed.shape();
                let gv = self.value(*gain);
                if self.rg(*gain) || self.rg(*shift) {
                    let mut dg = Tensor::zeros(d, 1);
                    let mut ds = Tensor::zeros(d, 1);
                    for r in 0..d {
                        let (mut sg, mut ss) = (0.0, 0.0);
                        for c in 0..n {
                            sg += gy.get(r, c) * normed.get(r, c);
                            ss += gy.get(r, c);
                        }
                        dg.set(r, 0, sg);
                        ds.set(r, 0, ss);
                    }
                    self.accumulate(grads, *gain, dg);
                    self.accumulate(grads, *shift, ds);
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(d, n);
                    let inv_d = 1.0 / d as f64;
                    for c in 0..n {
                        let (mut mean_g, mut mean_gx) = (0.0, 0.0);
                        for r in 0..d {
                            let gh = gy.get(r, c) * gv.get(r, 0);
                            mean_g += gh;
                            mean_gx += gh * normed.get(r, c);
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        for r in 0..d {
                            let gh = gy.get(r, c) * gv.get(r, 0);
                            dx.set(r, c, inv_std[c] * (gh - mean_g - normed.get(r, c) * mean_gx));
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if self.rg(*p) {
                        self.accumulate(grads, *p, gy.slice_cols(offset, offset + w));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.shape(*p)[0];
                    if self.rg(*p) {
                        self.accumulate(grads, *p, gy.slice_rows(offset, offset + h));
                    }
                    offset += h;
                }
            }
            Op::SliceCols(a, start) => {
                let [r, c] = self.shape(*a);
                let mut g = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..gy.cols() {
                        g.set(i, start + j, gy.get(i, j));
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::SliceRows(a, start) => {
                let [r, c] = self.shape(*a);
                let mut g = Tensor::zeros(r, c);
                for i in 0..gy.rows() {
                    for j in 0..c {
                        g.set(start + i, j, gy.get(i, j));
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ColumnCosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [d, n] = ta.shape();
                let mut ga = Tensor::zeros(d, n);
                let mut gb = Tensor::zeros(d, n);
                for c in 0..n {
                    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                    for r in 0..d {
                        let (x, y) = (ta.get(r, c), tb.get(r, c));
                        dot += x * y;
                        na += x * x;
                        nb += y * y;
                    }
                    if nb == 0.0 {
                        continue;
                    }
                    let (la, lb) = (na.sqrt(), nb.sqrt());
                    let cos = dot / (la * lb);
                    let g = gy.get(0, c);
                    for r in 0..d {
                        let (x, y) = (ta.get(r, c), tb.get(r, c));
                        ga.set(r, c, g * (y / (la * lb) - cos * x / na));
                        gb.set(r, c, g * (x / (la * lb) - cos * y / nb));
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Element(a, r, c) => {
                let [rows, cols] = self.shape(*a);
                let mut g = Tensor::zeros(rows, cols);
                g.set(*r, *c, gy.item());
                self.accumulate(grads, *a, g);
            }
        }
    }
}

/// Column-wise softmax with max subtraction.
pub fn softmax_columns(x: &Tensor) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::NumericDomain {
            op: "softmax",
            detail: "non-finite input".into(),
        });
    }
    let [r, c] = x.shape();
    let mut out = Tensor::zeros(r, c);
    for col in 0..c {
        let max = (0..r).map(|i| x.get(i, col)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for i in 0..r {
            let e = (x.get(i, col) - max).exp();
            out.set(i, col, e);
            total += e;
        }
        for i in 0..r {
            out.set(i, col, out.get(i, col) / total);
        }
    }
    Ok(out)
}

/// Softmax of a vector.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::input("softmax of an empty vector"));
    }
    Ok(softmax_columns(&Tensor::vector(x.to_vec()))?.into_data())
}

/// Per-column `(x − μ) / sqrt(σ² + eps)` plus the inverse std of each column.
fn normalize_columns(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let [d, n] = x.shape();
    let mut out = Tensor::zeros(d, n);
    let mut inv_std = Vec::with_capacity(n);
    for c in 0..n {
        let mean = (0..d).map(|r| x.get(r, c)).sum::<f64>() / d as f64;
        let var = (0..d).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        for r in 0..d {
            out.set(r, c, (x.get(r, c) - mean) * is);
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

/// Layer normalisation of a single vector.
pub fn layer_norm(x: &[f64], gain: &[f64], shift: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::vector(x.to_vec()));
    let gv = g.constant(Tensor::vector(gain.to_vec()));
    let sv = g.constant(Tensor::vector(shift.to_vec()));
    let out = g.layer_norm_cols(xv, gv, sv, eps)?;
    Ok(g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0], vec![3.0, 0.0]]).unwrap());
        let w = g.constant(Tensor::identity(3));
        let y = g.linear_nobias(x, w).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let w = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let x = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let y = g.linear_nobias(x, w).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn linear_shape_error() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::zeros(2, 3));
        let x = g.constant(Tensor::zeros(2, 5));
        let err = g.linear_nobias(x, w).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                left: [2, 3],
                right: [2, 5],
                ..
            }
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!(close(*got, want, 1e-15));
        }
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::NumericDomain { .. })));
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[2.0; 4], &[1.0; 4], &[0.0; 4], LAYER_NORM_EPS).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let out = layer_norm(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(out, vec![-1.0, 1.0]);
        let out = layer_norm(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0], LAYER_NORM_EPS).unwrap();
        assert!(close(out[0], -1.0, 1e-5) && close(out[1], 1.0, 1e-5));

        let out = layer_norm(&[5.0, -1.0, 2.0], &[0.0; 3], &[0.5, 1.5, -2.0], LAYER_NORM_EPS).unwrap();
        assert_eq!(out, vec![0.5, 1.5, -2.0]);

        assert!(matches!(
            layer_norm(&[1.0], &[1.0], &[0.0], LAYER_NORM_EPS),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn bilinear_gradient() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::vector(vec![0.3, -1.0, 2.0]));
        let x = g.param(&Tensor::vector(vec![4.0, 5.0, -6.0]));
        let wt = g.transpose(w);
        let loss = g.matmul(wt, x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[4.0, 5.0, -6.0]);
        assert_eq!(grads.get(x).data(), &[0.3, -1.0, 2.0]);
    }

    #[test]
    fn softmax_pick_first_matches_finite_differences() {
        let f = |x: &[f64]| softmax(x).unwrap()[0];
        let x0 = [0.7, -0.4];
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(x0.to_vec()));
        let s = g.softmax_cols(x).unwrap();
        let first = g.element(s, 0, 0).unwrap();
        let grads = g.backward(first).unwrap().get(x);
        let h = 1e-5;
        for i in 0..2 {
            let (mut p, mut m) = (x0, x0);
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let rel = (grads.data()[i] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel <= 1e-6, "component {i}: {} vs {fd}", grads.data()[i]);
        }
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(&Tensor::vector(vec![9.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0]);
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
        g.reset();
        assert!(g.backward(loss).is_ok());
    }

    #[test]
    fn zero_norm_pool_contributes_nothing() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::vector(vec![1.0, 0.0]));
        let b = g.param(&Tensor::vector(vec![0.0, 0.0]));
        let c = g.column_cosine(a, b).unwrap();
        assert_eq!(g.value(c).item(), 0.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(a).data(), &[0.0, 0.0]);
        let mut g = Graph::new();
        let a = g.param(&Tensor::vector(vec![0.0, 0.0]));
        let b = g.param(&Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.column_cosine(a, b), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            x in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&q));
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn layer_norm_standardises(x in proptest::collection::vec(-50.0f64..50.0, 2..20)) {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assume!(var > 1.0);
            let ones = vec![1.0; x.len()];
            let zeros = vec![0.0; x.len()];
            let y = layer_norm(&x, &ones, &zeros, LAYER_NORM_EPS).unwrap();
            let my = y.iter().sum::<f64>() / n;
            let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            prop_assert!(my.abs() <= 1e-9);
            prop_assert!((vy - 1.0).abs() <= 1e-5 / var + 1e-12);
            prop_assert!(var <= 10.0 || (vy - 1.0).abs() <= 1e-6);
        }
    }
}
