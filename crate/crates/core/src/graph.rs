//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends a node whose
//! inputs are strictly earlier nodes, so node order is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters are not copied into the graph: a parameter node reads its value
//! from the borrowed [`ParamStore`], and embedding lookups gather rows straight
//! out of it.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::params::{Gradients, ParamStore};
use crate::tensor::{kernel, sigmoid, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Activate(Var, Activation),
    SoftmaxRows(Var),
    LnClamped(Var, f64),
    MeanAxis(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    LayerNorm(Var, f64),
    ModalSum(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b)
            | ModalSum(a, b) => vec![*a, *b],
            Transpose(a)
            | Affine(a, _)
            | Activate(a, _)
            | SoftmaxRows(a)
            | LnClamped(a, _)
            | MeanAxis(a, _)
            | SumAll(a)
            | SliceCols(a, _)
            | SliceRows(a, _)
            | GatherRows(a, _)
            | Reshape(a)
            | LayerNorm(a, _) => vec![*a],
            Concat(parts, _) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, Var>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

/// Splits a shape around `axis` into (outer, axis length, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(512),
            param_nodes: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.params.get(id).value,
            _ => node.value.as_ref().expect("non-parameter nodes own a value"),
        }
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var, TensorError> {
        let id = self.params.require(name)?;
        Ok(self.param(id))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), out))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        self.push(Op::Affine(a, scale), out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    fn row_operand(&self, op: &'static str, a: Var, r: Var) -> Result<(), TensorError> {
        let (ta, tr) = (self.value(a), self.value(r));
        if tr.rank() != 1 || tr.len() != last_dim(ta) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Adds a vector to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        self.row_operand("add_row", a, bias)?;
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = tb.len();
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRow(a, bias), out))
    }

    /// Multiplies every row (last axis) of `a` by a vector, elementwise.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var, TensorError> {
        self.row_operand("mul_row", a, gain)?;
        let (ta, tw) = (self.value(a), self.value(gain));
        let n = tw.len();
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, w) in row.iter_mut().zip(tw.data()) {
                *o *= w;
            }
        }
        Ok(self.push(Op::MulRow(a, gain), out))
    }

    pub fn activate(&mut self, a: Var, kind: Activation) -> Var {
        let out = match kind {
            Activation::Sigmoid => self.value(a).map(sigmoid),
            Activation::Relu => self.value(a).map(|x| x.max(0.0)),
        };
        self.push(Op::Activate(a, kind), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = last_dim(t);
        let mut out = t.clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                kernel::softmax_in_place(row);
            }
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// `ln(max(a, floor))`; no gradient flows through clamped entries.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        self.push(Op::LnClamped(a, floor), out)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: t.shape().to_vec(),
            });
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let x = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(Op::MeanAxis(a, axis), out))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.value(*parts.first().ok_or(TensorError::EmptyConcat)?);
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: first.shape().to_vec(),
            });
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.shape().to_vec(),
                    right: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (m, n) = crate::tensor::as_matrix("slice_cols", t)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], out)?;
        Ok(self.push(Op::SliceCols(a, start), out))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.rank() == 0 || start + len > t.rows() {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: t.rows(),
            });
        }
        let c = t.cols();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(shape, t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(Op::SliceRows(a, start), out))
    }

    /// Row gather along the leading axis; gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(TensorError::RankMismatch {
                op: "gather_rows",
                expected: 2,
                shape: vec![],
            });
        }
        let rows = t.rows();
        let c = t.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, len: rows });
            }
            out.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(shape, out)?;
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = last_dim(t);
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(n) {
            let (mean, inv_std) = row_moments(row, eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv_std;
            }
        }
        self.push(Op::LayerNorm(a, eps), out)
    }

    /// `out[n, d] = Σ_m weights[n, m] · x[n, d, m]` for `x: [N×D×M]`, `weights: [N×M]`.
    pub fn modal_sum(&mut self, x: Var, weights: Var) -> Result<Var, TensorError> {
        let (tx, tw) = (self.value(x), self.value(weights));
        let ok = tx.rank() == 3
            && tw.rank() == 2
            && tx.shape()[0] == tw.shape()[0]
            && tx.shape()[2] == tw.shape()[1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "modal_sum",
                left: tx.shape().to_vec(),
                right: tw.shape().to_vec(),
            });
        }
        let (n, d, m) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let w = &tw.data()[i * m..(i + 1) * m];
            for j in 0..d {
                let xs = &tx.data()[(i * d + j) * m..(i * d + j + 1) * m];
                out[i * d + j] = xs.iter().zip(w).map(|(a, b)| a * b).sum();
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push(Op::ModalSum(x, weights), out))
    }

    /// `x · w + b` for `x: [m×k]`, `w: [k×n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar root. Returns the gradient of every
    /// reachable trainable parameter; frozen parameters get none.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, TensorError> {
        if self.backward_done {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.0 >= i) {
                return Err(TensorError::CyclicGraph {
                    node: i,
                    input: bad.0,
                });
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(&root_shape, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Gradients::empty(self.params.len());
        for (&id, &v) in &self.param_nodes {
            if self.params.get(id).frozen {
                continue;
            }
            if let Some(g) = grads[v.0].as_ref() {
                out.set(id, g.clone());
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.as_ref();
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                kernel::matmul_nt_acc(gd, tb.data(), acc(grads, *a, ta).data_mut(), m, n, k);
                kernel::matmul_tn_acc(ta.data(), gd, acc(grads, *b, tb).data_mut(), m, k, n);
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let da = acc(grads, *a, ta).data_mut();
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += gd[c * m + r];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, self.value(*a)).data_mut(), gd, 1.0);
                add_into(acc(grads, *b, self.value(*b)).data_mut(), gd, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, self.value(*a)).data_mut(), gd, 1.0);
                add_into(acc(grads, *b, self.value(*b)).data_mut(), gd, -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                for ((d, x), y) in acc(grads, *a, ta).data_mut().iter_mut().zip(gd).zip(tb.data()) {
                    *d += x * y;
                }
                for ((d, x), y) in acc(grads, *b, tb).data_mut().iter_mut().zip(gd).zip(ta.data()) {
                    *d += x * y;
                }
            }
            Op::Affine(a, s) => add_into(acc(grads, *a, self.value(*a)).data_mut(), gd, *s),
            Op::AddRow(a, b) => {
                let tb = self.value(*b);
                add_into(acc(grads, *a, self.value(*a)).data_mut(), gd, 1.0);
                let db = acc(grads, *b, tb).data_mut();
                for row in gd.chunks(tb.len()) {
                    add_into(db, row, 1.0);
                }
            }
            Op::MulRow(a, w) => {
                let (ta, tw) = (self.value(*a), self.value(*w));
                let n = tw.len();
                {
                    let da = acc(grads, *a, ta).data_mut();
                    for (drow, grow) in da.chunks_mut(n).zip(gd.chunks(n)) {
                        for ((d, gv), wv) in drow.iter_mut().zip(grow).zip(tw.data()) {
                            *d += gv * wv;
                        }
                    }
                }
                let dw = acc(grads, *w, tw).data_mut();
                for (grow, arow) in gd.chunks(n).zip(ta.data().chunks(n)) {
                    for ((d, gv), av) in dw.iter_mut().zip(grow).zip(arow) {
                        *d += gv * av;
                    }
                }
            }
            Op::Activate(a, kind) => {
                let ta = self.value(*a);
                let y = out.expect("owned").data();
                let da = acc(grads, *a, ta).data_mut();
                match kind {
                    Activation::Relu => {
                        for ((d, gv), x) in da.iter_mut().zip(gd).zip(ta.data()) {
                            if *x > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, gv), yv) in da.iter_mut().zip(gd).zip(y) {
                            *d += gv * yv * (1.0 - yv);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = out.expect("owned");
                let n = last_dim(y);
                let da = acc(grads, *a, self.value(*a)).data_mut();
                for ((drow, grow), yrow) in da
                    .chunks_mut(n)
                    .zip(gd.chunks(n))
                    .zip(y.data().chunks(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::LnClamped(a, floor) => {
                let ta = self.value(*a);
                let da = acc(grads, *a, ta).data_mut();
                for ((d, gv), x) in da.iter_mut().zip(gd).zip(ta.data()) {
                    if *x > *floor {
                        *d += gv / x;
                    }
                }
            }
            Op::MeanAxis(a, axis) => {
                let ta = self.value(*a);
                let (outer, len, inner) = split_axis(ta.shape(), *axis);
                let inv = 1.0 / len as f64;
                let da = acc(grads, *a, ta).data_mut();
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                        add_into(dst, src, inv);
                    }
                }
            }
            Op::SumAll(a) => {
                let s = gd[0];
                for d in acc(grads, *a, self.value(*a)).data_mut() {
                    *d += s;
                }
            }
            Op::Concat(parts, axis) => {
                let y = out.expect("owned");
                let (outer, _, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for p in parts {
                        let tp = self.value(*p);
                        let block = tp.shape()[*axis] * inner;
                        let dst = &mut acc(grads, *p, tp).data_mut()[o * block..(o + 1) * block];
                        add_into(dst, &gd[offset..offset + block], 1.0);
                        offset += block;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let n = ta.shape()[1];
                let len = last_dim(g);
                let da = acc(grads, *a, ta).data_mut();
                for (r, grow) in gd.chunks(len).enumerate() {
                    add_into(&mut da[r * n + start..r * n + start + len], grow, 1.0);
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let da = acc(grads, *a, ta).data_mut();
                add_into(&mut da[start * c..start * c + gd.len()], gd, 1.0);
            }
            Op::GatherRows(a, indices) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let da = acc(grads, *a, ta).data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut da[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c], 1.0);
                }
            }
            Op::Reshape(a) => add_into(acc(grads, *a, self.value(*a)).data_mut(), gd, 1.0),
            Op::LayerNorm(a, eps) => {
                let ta = self.value(*a);
                let n = last_dim(ta);
                let da = acc(grads, *a, ta).data_mut();
                for ((drow, grow), xrow) in da
                    .chunks_mut(n)
                    .zip(gd.chunks(n))
                    .zip(ta.data().chunks(n))
                {
                    let (mean, inv_std) = row_moments(xrow, *eps);
                    let nf = n as f64;
                    let g_mean: f64 = grow.iter().sum::<f64>() / nf;
                    let gx_mean: f64 = grow
                        .iter()
                        .zip(xrow)
                        .map(|(gv, x)| gv * (x - mean) * inv_std)
                        .sum::<f64>()
                        / nf;
                    for ((d, gv), x) in drow.iter_mut().zip(grow).zip(xrow) {
                        let xhat = (x - mean) * inv_std;
                        *d += inv_std * (gv - g_mean - xhat * gx_mean);
                    }
                }
            }
            Op::ModalSum(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, d, m) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                {
                    let dx = acc(grads, *x, tx).data_mut();
                    for i in 0..n {
                        for j in 0..d {
                            let gv = gd[i * d + j];
                            for k in 0..m {
                                dx[(i * d + j) * m + k] += gv * tw.data()[i * m + k];
                            }
                        }
                    }
                }
                let dw = acc(grads, *w, tw).data_mut();
                for i in 0..n {
                    for j in 0..d {
                        let gv = gd[i * d + j];
                        for k in 0..m {
                            dw[i * m + k] += gv * tx.data()[(i * d + j) * m + k];
                        }
                    }
                }
            }
        }
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t, false);
        s
    }

    #[test]
    fn square_gradient() {
        let store = store_with("p", Tensor::scalar(3.0));
        let mut g = Graph::new(&store);
        let p = g.param(0);
        let sq = g.mul(p, p).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(0).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_root_has_zero_gradient() {
        let store = store_with("p", Tensor::scalar(3.0));
        let mut g = Graph::new(&store);
        let p = g.param(0);
        let zero = g.scale(p, 0.0);
        let grads = g.backward(zero).unwrap();
        assert_eq!(grads.get(0).unwrap().item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(v), Err(TensorError::NonScalarRoot(_))));
        let s = g.sum_all(v);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::AlreadyBackpropagated));
        g.reset_grads();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("table", Tensor::filled(&[3, 2], 1.0), true);
        let mut g = Graph::new(&store);
        let t = g.param(0);
        let rows = g.gather_rows(t, &[1, 1]).unwrap();
        let s = g.sum_all(rows);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(0).is_none());
    }

    #[test]
    fn mean_axis_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        // x[d][m] with D = 2: column m1 = [1, 3], m2 = [2, 4]
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = g.mean_axis(x, 0).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 3.0]);

        let y = g.constant(Tensor::new(vec![3, 1], vec![5.0, 6.0, 7.0]).unwrap());
        let my = g.mean_axis(y, 1).unwrap();
        assert_eq!(g.value(my).data(), &[5.0, 6.0, 7.0]);

        let c = g.constant(Tensor::filled(&[2, 3, 4], 1.5));
        let mc = g.mean_axis(c, 1).unwrap();
        assert!(g.value(mc).data().iter().all(|&v| v == 1.5));
        assert!(g.mean_axis(c, 3).is_err());
    }

    #[test]
    fn concat_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let zc = g.concat(&[z, c], 0).unwrap();
        assert_eq!(g.value(zc).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

        let one = g.concat(&[z], 0).unwrap();
        assert_eq!(g.value(one), g.value(z));

        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn activations() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(vec![-2.0, 3.0, 0.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 3.0, 0.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[2], 0.5);
    }

    #[test]
    fn cyclic_reference_is_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::scalar(1.0));
        let y = g.affine(x, 2.0, 0.0);
        // Corrupt the graph so y's input points at itself.
        g.nodes[y.0].op = Op::Affine(y, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::CyclicGraph { .. })));
    }
}
